//! Stage 2: bidirectional masked-token model over the token grid.
//!
//! A transformer reads an H×W grid of codebook indices (some replaced
//! by the reserved MASK id), attends across all positions in both
//! directions, and predicts a distribution over the K codes at every
//! cell. Training masks a uniform-random portion of each grid and
//! minimizes cross-entropy of the true tokens at the masked positions
//! only. At inference the same model yields token likelihoods for
//! anomaly scoring, and iterative decoding fills masked cells to sample
//! "likely normal" grids for counterfactuals.
//!
//! The grid is flattened row-major over (h, w) with learned positional
//! embeddings; the flattening is part of the checkpoint format (see
//! `nn::CHECKPOINT_FORMAT_VERSION`).

use candle_core::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{
    adamw, derive_seed, embedding, layer_norm, linear, step, Budget, Checkpointer, CosineLr,
    LayerNorm, ParamStore, TransformerBlock,
};
use crate::tokenizer::TokenGrid;

use candle_nn::Module;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Binary keep/mask grid matching the token grid's shape (true = keep,
/// false = masked).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    keep: Vec<bool>,
}

impl MaskGrid {
    pub fn all_keep(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            keep: vec![true; h * w],
        }
    }

    pub fn all_masked(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            keep: vec![false; h * w],
        }
    }

    pub fn from_flags(h: usize, w: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != h * w {
            return Err(Error::Shape(format!(
                "{} flags cannot fill an {h}x{w} mask",
                keep.len()
            )));
        }
        Ok(Self { h, w, keep })
    }

    #[inline]
    pub fn keep(&self, h: usize, w: usize) -> bool {
        self.keep[h * self.w + w]
    }

    #[inline]
    pub fn set_keep(&mut self, h: usize, w: usize, keep: bool) {
        self.keep[h * self.w + w] = keep;
    }

    /// Mask every row of latent column `w`.
    pub fn mask_column(&mut self, w: usize) {
        for h in 0..self.h {
            self.set_keep(h, w, false);
        }
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Replace masked positions of `s` with the MASK id: s ⊙ m + MASK ⊙ (1−m).
pub fn apply_mask(s: &TokenGrid, m: &MaskGrid, mask_id: u32) -> Result<TokenGrid> {
    if s.h != m.h || s.w != m.w {
        return Err(Error::Shape(format!(
            "token grid {}x{} vs mask {}x{}",
            s.h, s.w, m.h, m.w
        )));
    }
    let mut out = s.clone();
    for h in 0..s.h {
        for w in 0..s.w {
            if !m.keep(h, w) {
                out.set(h, w, mask_id);
            }
        }
    }
    Ok(out)
}

/// Per-position unnormalized log-likelihoods u ∈ R^{H×W×K}.
#[derive(Debug, Clone)]
pub struct LogitGrid {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Row-major (h, w, k).
    data: Vec<f64>,
}

impl LogitGrid {
    pub fn from_data(h: usize, w: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * k {
            return Err(Error::Shape(format!(
                "{} logits cannot fill an {h}x{w}x{k} grid",
                data.len()
            )));
        }
        Ok(Self { h, w, k, data })
    }

    /// The K logits at cell (h, w).
    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        let base = (h * self.w + w) * self.k;
        &self.data[base..base + self.k]
    }
}

/// log(Σ exp(u)) computed stably.
fn log_sum_exp(u: &[f64]) -> f64 {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + u.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax token likelihood p(s_hw | s_M) at every position (Eq. 1a),
/// evaluated in the log domain for numerical stability.
///
/// `s` is the ground-truth grid being scored; it must not contain MASK.
pub fn token_probability(u: &LogitGrid, s: &TokenGrid) -> Result<Vec<f64>> {
    Ok(token_log_probability(u, s)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// log p(s_hw | s_M) per position, row-major H×W.
pub fn token_log_probability(u: &LogitGrid, s: &TokenGrid) -> Result<Vec<f64>> {
    if s.h != u.h || s.w != u.w {
        return Err(Error::Shape(format!(
            "token grid {}x{} vs logits {}x{}",
            s.h, s.w, u.h, u.w
        )));
    }
    let k = u.k as u32;
    let mut out = Vec::with_capacity(s.h * s.w);
    for h in 0..s.h {
        for w in 0..s.w {
            let id = s.get(h, w);
            if id >= k {
                return Err(Error::Input(format!(
                    "grid being scored contains MASK or out-of-range id {id} at ({h},{w})"
                )));
            }
            let logits = u.at(h, w);
            out.push(logits[id as usize] - log_sum_exp(logits));
        }
    }
    Ok(out)
}

/// Stage-2 model: token + positional embeddings, transformer stack,
/// two-layer projection head to K logits.
pub struct Prior {
    store: ParamStore,
    pub h: usize,
    pub w: usize,
    /// Codebook size K; the vocabulary is K+1 (codes plus MASK).
    pub k: usize,
    pub width: usize,
    embed: candle_nn::Embedding,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head1: candle_nn::Linear,
    head2: candle_nn::Linear,
}

impl Prior {
    pub fn new(config: &RunConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        let k = config.tokenizer.codebook_size;
        let width = config.prior.width;
        let hidden = if config.prior.head_hidden == 0 {
            width
        } else {
            config.prior.head_hidden
        };
        let mut store = ParamStore::new(&candle_core::Device::Cpu, seed);
        let embed = embedding(&mut store, "prior.embed", k + 1, width)?;
        let pos = store.var(
            "prior.pos",
            &[h * w, width],
            crate::nn::Init::Normal { mean: 0.0, sd: 0.02 },
        )?;
        let mut blocks = Vec::with_capacity(config.prior.depth);
        for i in 0..config.prior.depth {
            blocks.push(TransformerBlock::new(
                &mut store,
                &format!("prior.block{i}"),
                width,
                config.prior.heads,
            )?);
        }
        let ln_f = layer_norm(&mut store, "prior.ln_f", width)?;
        let head1 = linear(&mut store, "prior.head.fc1", width, hidden)?;
        let head2 = linear(&mut store, "prior.head.fc2", hidden, k)?;
        Ok(Self {
            store,
            h,
            w,
            k,
            width,
            embed,
            pos,
            blocks,
            ln_f,
            head1,
            head2,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Overwrite all parameters from a saved checkpoint file.
    pub fn load_params(&self, path: &std::path::Path) -> Result<()> {
        self.store.load(path)
    }

    /// The reserved token id standing for "masked".
    pub fn mask_id(&self) -> u32 {
        self.k as u32
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.h != self.h || grid.w != self.w {
            return Err(Error::Shape(format!(
                "grid {}x{} does not match model geometry {}x{}",
                grid.h, grid.w, self.h, self.w
            )));
        }
        if let Some(&bad) = grid.ids().iter().find(|&&id| id > self.k as u32) {
            return Err(Error::Input(format!(
                "token id {bad} exceeds the vocabulary (K = {}, MASK = {})",
                self.k, self.k
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch of (possibly masked) grids: (B, H·W, K).
    pub fn predict_logits_batch(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        if grids.is_empty() {
            return Err(Error::Input("empty grid batch".into()));
        }
        for grid in grids {
            self.check_grid(grid)?;
        }
        let b = grids.len();
        let s = self.positions();
        let ids: Vec<u32> = grids.iter().flat_map(|g| g.ids().iter().copied()).collect();
        let ids = Tensor::from_vec(ids, (b, s), self.store.device())?;
        let mut x = self
            .embed
            .forward(&ids)? // (B, S, E)
            .broadcast_add(&self.pos.unsqueeze(0)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.ln_f.forward(&x)?;
        let hidden = self.head1.forward(&x)?.gelu_erf()?;
        Ok(self.head2.forward(&hidden)?)
    }

    /// Forward pass for one grid, returned as a host-side logit grid.
    pub fn predict_logits(&self, grid: &TokenGrid) -> Result<LogitGrid> {
        let logits = self.predict_logits_batch(std::slice::from_ref(grid))?;
        let data: Vec<f64> = logits.flatten_all()?.to_vec1()?;
        LogitGrid::from_data(self.h, self.w, self.k, data)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Cross-entropy of `targets` under `logits`, averaged over the
/// positions where `masked` is true; unmasked positions contribute
/// exactly zero (including their gradients).
///
/// `logits` (N, K); `targets` and `masked` length N.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u32], masked: &[bool]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n || masked.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows vs {} targets / {} mask flags",
            targets.len(),
            masked.len()
        )));
    }
    let n_masked = masked.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::Input("no masked positions to score".into()));
    }
    let rows: Vec<i64> = masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i as i64)
        .collect();
    let row_idx = Tensor::from_vec(rows.clone(), rows.len(), logits.device())?;
    let picked = logits.index_select(&row_idx, 0)?; // (M, K)
    let logp = candle_nn::ops::log_softmax(&picked, 1)?;
    // Select each row's target via a one-hot product (index_select +
    // matmul differentiate correctly; fancier gather ops are avoided).
    let mut one_hot = vec![0.0f64; rows.len() * k];
    for (mi, &row) in rows.iter().enumerate() {
        one_hot[mi * k + targets[row as usize] as usize] = 1.0;
    }
    let one_hot = Tensor::from_vec(one_hot, (rows.len(), k), logits.device())?;
    let nll = logp.mul(&one_hot)?.sum(1)?.neg()?; // (M,)
    Ok(nll.mean_all()?)
}

/// Per-epoch stage-2 statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Train the prior on token grids from a frozen stage-1 tokenizer.
///
/// Each grid in each batch draws its own mask ratio r ~ U(0,1) and
/// masks ⌈r·H·W⌉ uniformly chosen positions; the loss is cross-entropy
/// of the true tokens at masked positions only. Grids that draw r = 0
/// are skipped for that step.
pub fn train_stage2(
    grids: &[TokenGrid],
    config: &RunConfig,
    budget: &Budget,
    mut ckpt: Option<&mut Checkpointer>,
    resume: Option<(Prior, usize)>,
) -> Result<(Prior, Vec<Stage2Epoch>)> {
    if grids.is_empty() {
        return Err(Error::Input("stage-2 training needs at least one grid".into()));
    }
    let (h, w) = (grids[0].h, grids[0].w);
    if grids.iter().any(|g| g.h != h || g.w != w) {
        return Err(Error::Shape("training grids differ in shape".into()));
    }
    let (model, start_epoch) = match resume {
        Some((model, epoch)) => (model, epoch),
        None => (
            Prior::new(config, h, w, derive_seed(config.seed, "stage2-init"))?,
            0,
        ),
    };
    if model.h != h || model.w != w {
        return Err(Error::Shape(format!(
            "resumed model geometry {}x{} does not match grids {h}x{w}",
            model.h, model.w
        )));
    }
    let s = h * w;
    let mask_id = model.mask_id();
    let mut opt = adamw(
        model.store.all_vars(),
        config.train.learning_rate,
        config.train.weight_decay,
    )?;
    let schedule = CosineLr {
        base: config.train.learning_rate,
        total: config.train.stage2_epochs,
    };
    let mut log = Vec::new();

    for epoch in start_epoch..config.train.stage2_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &format!("stage2-epoch-{epoch}"),
        ));
        let mut order: Vec<usize> = (0..grids.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0.0f64;
        for batch in order.chunks(config.train.batch_size) {
            budget.check("stage-2 training")?;
            let mut masked_grids = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len() * s);
            let mut masked_flags = Vec::with_capacity(batch.len() * s);
            for &gi in batch {
                let grid = &grids[gi];
                let u: f64 = rng.random();
                // Uniform mask-ratio by default; the cosine curve (which
                // skews toward heavier masking) is kept for ablation.
                let r = if config.prior.cosine_mask_schedule {
                    (std::f64::consts::PI * u / 2.0).cos()
                } else {
                    u
                };
                let n_masked = ((r * s as f64).ceil() as usize).min(s);
                let mut positions: Vec<usize> = (0..s).collect();
                positions.shuffle(&mut rng);
                let mut mask = MaskGrid::all_keep(h, w);
                for &p in positions.iter().take(n_masked) {
                    mask.set_keep(p / w, p % w, false);
                }
                targets.extend_from_slice(grid.ids());
                masked_flags.extend((0..s).map(|p| !mask.keep(p / w, p % w)));
                masked_grids.push(apply_mask(grid, &mask, mask_id)?);
            }
            if masked_flags.iter().all(|&m| !m) {
                // Every grid drew r = 0: nothing to score this step.
                continue;
            }
            let logits = model
                .predict_logits_batch(&masked_grids)?
                .reshape((batch.len() * s, model.k))?;
            let loss = masked_cross_entropy(&logits, &targets, &masked_flags)?;
            let loss_value: f64 = loss.to_scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage-2 loss became {loss_value} at epoch {epoch}; last good epoch checkpointed"
                )));
            }
            step(&mut opt, &loss, schedule.at(epoch))?;
            epoch_loss += loss_value;
            steps += 1.0;
        }
        log.push(Stage2Epoch {
            epoch,
            train_loss: if steps > 0.0 { epoch_loss / steps } else { 0.0 },
        });
        if let Some(ckpt) = ckpt.as_deref_mut() {
            ckpt.save_stage2(&model.store, epoch + 1)?;
        }
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Iterative decoding
// ---------------------------------------------------------------------------

/// Number of positions still masked after each decoding step for `n0`
/// initially masked cells: a cosine schedule forced to decrease by at
/// least one per step and to reach zero at the final step.
pub fn decode_schedule(n0: usize, steps: usize) -> Vec<usize> {
    let mut remaining = Vec::with_capacity(steps);
    let mut prev = n0;
    for t in 1..=steps {
        let frac = (std::f64::consts::PI * t as f64 / (2.0 * steps as f64)).cos();
        let mut target = ((n0 as f64) * frac).floor() as usize;
        if target >= prev {
            target = prev.saturating_sub(1);
        }
        if t == steps {
            target = 0;
        }
        remaining.push(target);
        prev = target;
        if target == 0 {
            break;
        }
    }
    remaining
}

/// Fill every MASK cell of `s_m` by iterative decoding: at each step the
/// highest-confidence fraction of the remaining masked positions (cosine
/// schedule) is committed. Confidence is the candidate's log-likelihood
/// plus Gumbel noise scaled by a linearly annealed temperature (1 → 0
/// over the steps); `temperature = 0` is fully deterministic. Unmasked
/// positions are never altered.
pub fn iterative_decode(
    s_m: &TokenGrid,
    model: &Prior,
    steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenGrid> {
    if steps == 0 {
        return Err(Error::Config("iterative decoding needs at least one step".into()));
    }
    let mask_id = model.mask_id();
    let n0 = s_m.count_eq(mask_id);
    if n0 == 0 {
        return Err(Error::Input(
            "grid has no MASK entries; nothing to sample".into(),
        ));
    }
    let schedule = decode_schedule(n0, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = s_m.clone();
    for (step_index, &target_remaining) in schedule.iter().enumerate() {
        let logits = model.predict_logits(&grid)?;
        // Linear 1 → 0 anneal across the ORIGINAL step budget.
        let tau = temperature * (1.0 - (step_index + 1) as f64 / steps as f64);
        let mut candidates: Vec<(usize, usize, u32, f64)> = Vec::new(); // (h, w, token, confidence)
        for h in 0..grid.h {
            for w in 0..grid.w {
                if grid.get(h, w) != mask_id {
                    continue;
                }
                let u = logits.at(h, w);
                let lse = log_sum_exp(u);
                let token = if temperature > 0.0 {
                    // Gumbel-max categorical sample.
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for (i, &v) in u.iter().enumerate() {
                        let g = -(-(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln()).ln();
                        let perturbed = v + g;
                        if perturbed > best_v {
                            best_v = perturbed;
                            best = i;
                        }
                    }
                    best
                } else {
                    // Deterministic: highest logit, lowest index on ties.
                    let mut best = 0usize;
                    for (i, &v) in u.iter().enumerate() {
                        if v > u[best] {
                            best = i;
                        }
                    }
                    best
                };
                let mut confidence = u[token] - lse;
                if tau > 0.0 {
                    let g = -(-(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln()).ln();
                    confidence += tau * g;
                }
                candidates.push((h, w, token as u32, confidence));
            }
        }
        // Commit the most confident candidates down to the scheduled
        // remaining count; ties break toward earlier positions.
        let commit_count = candidates.len().saturating_sub(target_remaining);
        candidates.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
        });
        for &(h, w, token, _) in candidates.iter().take(commit_count) {
            grid.set(h, w, token);
        }
    }
    debug_assert_eq!(grid.count_eq(mask_id), 0);
    Ok(grid)
}
