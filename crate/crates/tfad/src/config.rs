//! Run configuration: every tunable of the pipeline in one serializable
//! struct, with `desk` (minutes on a laptop CPU) and `full` (paper-scale)
//! presets.
//!
//! A run writes its fully resolved config next to its outputs so results
//! are self-describing; the SHA-256 hash of the canonical serialization
//! identifies the configuration in checkpoints and CSV sidecars.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::spectral::{StftParams, WindowKind};

/// Input/output locations for a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathsConfig {
    /// Directory holding the archive text files (one series per file).
    pub data_dir: PathBuf,
    /// CSV mapping dataset name to period P (`name,period` with header).
    pub period_csv: PathBuf,
    /// Directory for score/counterfactual/summary CSVs and plots.
    pub out_dir: PathBuf,
    /// Directory for model checkpoints and loss logs.
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            period_csv: PathBuf::from("data/periods.csv"),
            out_dir: PathBuf::from("out"),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

/// Short-time Fourier transform settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectralConfig {
    /// FFT length; H = n_fft/2 + 1 frequency rows.
    pub n_fft: usize,
    /// Hop between frames; 0 means "derive as max(1, n_fft/4)".
    pub hop: usize,
    /// Analysis/synthesis window shape.
    #[serde(default)]
    pub window: WindowKind,
}

impl SpectralConfig {
    /// Number of stored frequency rows for the configured `n_fft`.
    pub fn freq_rows(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Effective hop length (resolves the 0 = derived-default sentinel).
    pub fn effective_hop(&self) -> usize {
        if self.hop == 0 {
            (self.n_fft / 4).max(1)
        } else {
            self.hop
        }
    }

    /// Resolve into transform parameters.
    pub fn to_params(&self) -> Result<StftParams> {
        StftParams::new(self.n_fft, self.effective_hop(), self.window)
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            n_fft: 4,
            hop: 0,
            window: WindowKind::Rect,
        }
    }
}

/// Per-row normalization choice inside the tokenizer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RowNorm {
    /// No normalization layers (default: preserves per-row scale, which
    /// carries the information that separates quiet and loud bands).
    None,
    /// Layer norm over (channel, width) within each frequency row.
    Row,
}

/// Stage-1 tokenizer (encoder / vector quantizer / decoder) settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerConfig {
    /// Latent code dimension D.
    pub latent_dim: usize,
    /// Codebook size K (MASK id is K, outside the codebook).
    pub codebook_size: usize,
    /// Desired downsampled width W; the number of width-halving stages is
    /// derived from this and the spectrogram width.
    pub target_width: usize,
    /// Channel count of the first encoder stage; doubles per stage.
    pub base_channels: usize,
    /// Residual blocks per resolution stage.
    pub res_blocks: usize,
    /// Normalization inside encoder/decoder blocks.
    pub row_norm: RowNorm,
    /// Commitment loss weight (β in the VQ objective).
    pub commitment_weight: f64,
    /// Exponential-moving-average decay for codebook updates.
    pub ema_decay: f64,
    /// Re-seed a code after this many consecutive epochs unused.
    pub dead_code_epochs: usize,
    /// Weight of the auxiliary spectrogram-domain reconstruction term
    /// added to the time-domain loss; 0 disables it.
    pub spec_loss_weight: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            codebook_size: 128,
            target_width: 32,
            base_channels: 64,
            res_blocks: 1,
            row_norm: RowNorm::None,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            dead_code_epochs: 3,
            spec_loss_weight: 1.0,
        }
    }
}

/// Stage-2 masked-transformer prior settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorConfig {
    /// Transformer depth (number of blocks).
    pub depth: usize,
    /// Model width (embedding dimension).
    pub width: usize,
    /// Attention heads; must divide `width`.
    pub heads: usize,
    /// Hidden width of the two-layer logit head; 0 means "same as width".
    pub head_hidden: usize,
    /// Iterative-decoding steps T_s.
    pub decode_steps: usize,
    /// Train-time mask-ratio schedule: uniform r ~ U(0,1) (paper) or the
    /// cosine schedule, kept for ablation.
    pub cosine_mask_schedule: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            head_hidden: 0,
            decode_steps: 20,
            cosine_mask_schedule: false,
        }
    }
}

/// Anomaly-scoring settings (Algorithm 1 knobs).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoringConfig {
    /// Latent window-size rates; each yields α = max(1, ⌊r·W/2⌋).
    pub window_rates: Vec<f64>,
    /// Rolling-window stride as a fraction of the window length T.
    pub stride_rate: f64,
    /// Quantile for the anomaly threshold fit on training scores.
    pub quantile: f64,
    /// Divide accumulated scores by per-timestep overlap counts before
    /// summing over α (keeps edge and interior scores comparable).
    pub normalize_overlap: bool,
    /// Cap on the masked fraction of latent columns during
    /// counterfactual resampling.
    pub max_mask_fraction: f64,
    /// Counterfactual samples drawn per flagged window.
    pub counterfactual_samples: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            window_rates: vec![0.1, 0.3, 0.5],
            stride_rate: 0.1,
            quantile: 0.99,
            normalize_overlap: true,
            max_mask_fraction: 0.9,
            counterfactual_samples: 1,
        }
    }
}

/// Optimizer and schedule settings shared by both training stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate (cosine-annealed to zero over the run).
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Mini-batch size; halved automatically if a step fails to allocate.
    pub batch_size: usize,
    /// Stage-1 epoch cap.
    pub stage1_epochs: usize,
    /// Stage-2 epoch cap.
    pub stage2_epochs: usize,
    /// Stride between training windows extracted from the train split
    /// (1 = every window).
    pub train_stride: usize,
    /// Wall-clock budget in seconds for one `train` invocation; on
    /// expiry a resumable checkpoint is written and the run exits with
    /// the wall-clock status code. 0 disables the cap.
    pub wall_clock_secs: u64,
    /// Fraction of windows held out for the stage-1 validation loss.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 512,
            stage1_epochs: 500,
            stage2_epochs: 1000,
            train_stride: 1,
            wall_clock_secs: 12 * 3600,
            holdout_fraction: 0.1,
        }
    }
}

/// The complete, serializable configuration of a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RunConfig {
    /// Master random seed; every stochastic component derives its own
    /// stream from this plus a fixed purpose tag.
    pub seed: u64,
    pub paths: PathsConfig,
    pub spectral: SpectralConfig,
    pub tokenizer: TokenizerConfig,
    pub prior: PriorConfig,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Paper-scale preset (codebook 128, width-32 grid, 500/1000 epochs,
    /// 12 h wall-clock cap).
    pub fn full() -> Self {
        Self::default()
    }

    /// Desk preset: small enough to train in about a minute per dataset
    /// on one CPU core while exercising every pipeline stage.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            spectral: SpectralConfig {
                n_fft: 4,
                // Half-overlap keeps exact reconstruction while halving
                // the frame count (and so every conv length) versus the
                // derived unit hop.
                hop: 2,
                window: WindowKind::Rect,
            },
            tokenizer: TokenizerConfig {
                latent_dim: 16,
                codebook_size: 32,
                target_width: 16,
                base_channels: 16,
                res_blocks: 1,
                row_norm: RowNorm::None,
                commitment_weight: 0.25,
                ema_decay: 0.9,
                dead_code_epochs: 3,
                spec_loss_weight: 1.0,
            },
            prior: PriorConfig {
                depth: 2,
                width: 64,
                heads: 4,
                head_hidden: 0,
                decode_steps: 8,
                cosine_mask_schedule: false,
            },
            scoring: ScoringConfig {
                window_rates: vec![0.1, 0.3, 0.5],
                stride_rate: 0.1,
                quantile: 0.99,
                normalize_overlap: true,
                max_mask_fraction: 0.9,
                counterfactual_samples: 1,
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                weight_decay: 1e-5,
                batch_size: 128,
                stage1_epochs: 14,
                stage2_epochs: 24,
                train_stride: 6,
                wall_clock_secs: 0,
                holdout_fraction: 0.1,
            },
        }
    }

    /// Check every cross-field invariant; called before any command runs.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        if self.spectral.n_fft < 2 || self.spectral.n_fft % 2 != 0 {
            return Err(cfg(format!(
                "n_fft must be an even integer >= 2, got {}",
                self.spectral.n_fft
            )));
        }
        if self.tokenizer.codebook_size == 0 {
            return Err(cfg("codebook_size must be positive".into()));
        }
        if self.tokenizer.latent_dim == 0 {
            return Err(cfg("latent_dim must be positive".into()));
        }
        if self.tokenizer.target_width == 0 {
            return Err(cfg("target_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tokenizer.ema_decay) {
            return Err(cfg(format!(
                "ema_decay must lie in [0,1), got {}",
                self.tokenizer.ema_decay
            )));
        }
        if self.prior.width == 0 || self.prior.heads == 0 || self.prior.width % self.prior.heads != 0
        {
            return Err(cfg(format!(
                "prior width {} must be a positive multiple of heads {}",
                self.prior.width, self.prior.heads
            )));
        }
        if self.prior.decode_steps == 0 {
            return Err(cfg("decode_steps must be >= 1".into()));
        }
        if self.scoring.window_rates.is_empty() {
            return Err(cfg("window_rates must be nonempty".into()));
        }
        for &r in &self.scoring.window_rates {
            if !(r > 0.0 && r <= 0.7) {
                return Err(cfg(format!(
                    "window rate {r} outside (0, 0.7]: wider windows mask too much context"
                )));
            }
        }
        if !(self.scoring.stride_rate > 0.0 && self.scoring.stride_rate <= 1.0) {
            return Err(cfg(format!(
                "stride_rate {} outside (0, 1]",
                self.scoring.stride_rate
            )));
        }
        if !(self.scoring.quantile > 0.0 && self.scoring.quantile < 1.0) {
            return Err(cfg(format!(
                "quantile {} outside (0, 1)",
                self.scoring.quantile
            )));
        }
        if !(self.scoring.max_mask_fraction > 0.0 && self.scoring.max_mask_fraction <= 1.0) {
            return Err(cfg(format!(
                "max_mask_fraction {} outside (0, 1]",
                self.scoring.max_mask_fraction
            )));
        }
        if self.train.batch_size == 0 {
            return Err(cfg("batch_size must be positive".into()));
        }
        if self.train.train_stride == 0 {
            return Err(cfg("train_stride must be >= 1".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(cfg("learning_rate must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.train.holdout_fraction) {
            return Err(cfg(format!(
                "holdout_fraction {} outside [0, 0.9)",
                self.train.holdout_fraction
            )));
        }
        Ok(())
    }

    /// Parse and validate a TOML config file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Serialize to TOML text (stable field order via serde derive).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Write the resolved config next to a run's outputs.
    pub fn write_toml_file(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML serialization; identifies this
    /// configuration in checkpoints and output sidecars.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
