//! Counterfactual resampling: what the model thinks the series should
//! have looked like where it flagged an anomaly.
//!
//! A quantile threshold fitted on training-split scores marks anomalous
//! timesteps. The latent columns behind those timesteps are masked
//! across every frequency row (capped so some context always survives)
//! and refilled by the prior's iterative decoder; decoding the repaired
//! grid back through the tokenizer and the inverse transform — then
//! undoing the window's z-normalization — yields a "likely normal"
//! realization of the window at the original scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::prior::{apply_mask, iterative_decode, MaskGrid, Prior};
use crate::scoring::{alpha_from_rate, map_to_data_space, moving_average, score_window, ScoreMap};
use crate::tokenizer::{TokenGrid, Tokenizer};

/// Anomaly threshold: a quantile of the training-split scores, tagged
/// with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// The quantile the value was read at.
    pub quantile: f64,
    /// Dataset the training scores came from.
    pub dataset: String,
    /// Hash of the config the scores were produced under.
    pub config_hash: String,
}

/// Linear-interpolation quantile of the training scores.
pub fn compute_threshold(
    train_scores: &[f64],
    quantile: f64,
    dataset: &str,
    config_hash: &str,
) -> Result<Threshold> {
    if train_scores.is_empty() {
        return Err(Error::Input("cannot fit a threshold on no scores".into()));
    }
    if !(0.0 < quantile && quantile < 1.0) {
        return Err(Error::Config(format!(
            "quantile {quantile} outside (0, 1)"
        )));
    }
    let mut sorted = train_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let pos = quantile * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let value = sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    if value < 0.0 {
        return Err(Error::Input(format!(
            "threshold {value} is negative; anomaly scores must be non-negative"
        )));
    }
    Ok(Threshold {
        value,
        quantile,
        dataset: dataset.to_string(),
        config_hash: config_hash.to_string(),
    })
}

/// Flag each timestep whose score strictly exceeds the threshold.
pub fn detect_anomalous_steps(a_final: &[f64], threshold: &Threshold) -> Vec<bool> {
    a_final.iter().map(|&v| v > threshold.value).collect()
}

/// Window origins (relative to the flagged region's start) covering
/// every maximal run of flagged timesteps: one length-`t` window
/// centered on each run, clamped to the region.
pub fn flagged_window_origins(flags: &[bool], t: usize) -> Vec<usize> {
    let l = flags.len();
    if l < t {
        return Vec::new();
    }
    let mut origins = std::collections::BTreeSet::new();
    let mut run_start = None;
    for i in 0..=l {
        match (run_start, i < l && flags[i]) {
            (None, true) => run_start = Some(i),
            (Some(start), false) => {
                let mid = (start + i - 1) / 2;
                let origin = mid.saturating_sub(t / 2).min(l - t);
                origins.insert(origin);
                run_start = None;
            }
            _ => {}
        }
    }
    origins.into_iter().collect()
}

/// One resampled window.
#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    /// The window that was resampled (normalized values + norm params).
    pub window: Window,
    /// Timestep flags within the window (true = anomalous).
    pub flags: Vec<bool>,
    /// The latent mask that was applied (false = resampled column).
    pub mask: MaskGrid,
    /// The repaired token grid after iterative decoding.
    pub resampled_grid: TokenGrid,
    /// The counterfactual series at the original scale, length T.
    pub x_cf: Vec<f64>,
    /// Single-window final score of x_cf, for post-hoc validation.
    pub post_scores: Vec<f64>,
}

/// Single-window final score: latent maps per α, data-space projection,
/// α-sum, frequency mean, length-T moving average, and the half-sum —
/// the series pipeline restricted to one window (overlap count 1).
pub fn window_a_final(
    tokenizer: &Tokenizer,
    prior: &Prior,
    window: &Window,
    config: &RunConfig,
) -> Result<Vec<f64>> {
    let width = tokenizer.shape.width;
    let t = window.x.len();
    let alphas: Vec<usize> = config
        .scoring
        .window_rates
        .iter()
        .map(|&r| alpha_from_rate(r, width))
        .collect();
    let maps = score_window(tokenizer, prior, window, &alphas)?;
    let mut summed = ScoreMap::zeros(tokenizer.shape.freq_rows, t);
    for latent in &maps {
        summed.add_map(&map_to_data_space(latent, t)?)?;
    }
    let freq_mean = summed.row_mean();
    let smoothed = moving_average(&freq_mean, t);
    Ok(freq_mean
        .iter()
        .zip(&smoothed)
        .map(|(a, b)| (a + b) / 2.0)
        .collect())
}

/// Resample the flagged part of one window into a likely-normal state.
///
/// Flagged timesteps select latent columns through the inverse of the
/// nearest-neighbor data-space map; those columns are masked across all
/// frequency rows, capped at `max_mask_fraction` of the grid width —
/// when over the cap, the flagged columns with the LOWEST scores stay
/// unmasked as trusted context. Iterative decoding refills the masked
/// columns, the tokenizer decodes the repaired grid, and the window's
/// stored normalization parameters take the result back to the original
/// scale.
///
/// `scores` are the per-timestep final scores over the window's span,
/// used for the over-cap ranking.
pub fn resample_counterfactual(
    window: &Window,
    flags: &[bool],
    scores: &[f64],
    tokenizer: &Tokenizer,
    prior: &Prior,
    config: &RunConfig,
    seed: u64,
) -> Result<CounterfactualResult> {
    let t = window.x.len();
    if flags.len() != t || scores.len() != t {
        return Err(Error::Shape(format!(
            "window length {t} vs {} flags / {} scores",
            flags.len(),
            scores.len()
        )));
    }
    let h = tokenizer.shape.freq_rows;
    let width = tokenizer.shape.width;
    if prior.h != h || prior.w != width || prior.k != tokenizer.shape.codebook_size {
        return Err(Error::Config(format!(
            "prior geometry {}x{} over {} codes does not match tokenizer {h}x{width} over {}",
            prior.h, prior.w, prior.k, tokenizer.shape.codebook_size
        )));
    }
    if !flags.iter().any(|&f| f) {
        return Err(Error::Input(
            "no flagged timesteps in the window; nothing to resample".into(),
        ));
    }

    // Flagged data timesteps -> latent columns, with the worst score
    // seen over each column's flagged span.
    let mut column_worst: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (i, (&flagged, &score)) in flags.iter().zip(scores).enumerate() {
        if flagged {
            let col = i * width / t;
            let entry = column_worst.entry(col).or_insert(f64::NEG_INFINITY);
            *entry = entry.max(score);
        }
    }
    let cap = (config.scoring.max_mask_fraction * width as f64).floor() as usize;
    if cap == 0 {
        return Err(Error::Config(format!(
            "mask cap rounds to zero columns (fraction {} of width {width})",
            config.scoring.max_mask_fraction
        )));
    }
    let mut ranked: Vec<(usize, f64)> = column_worst.into_iter().collect();
    // Highest score first; ties resolve to the earlier column.
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut mask = MaskGrid::all_keep(h, width);
    for &(col, _) in ranked.iter().take(cap) {
        mask.mask_column(col);
    }

    let s = tokenizer.tokenize_window(window)?;
    let masked = apply_mask(&s, &mask, prior.mask_id())?;
    let resampled_grid = iterative_decode(&masked, prior, config.prior.decode_steps, 1.0, seed)?;
    let z_q = tokenizer.lookup(&resampled_grid)?;
    let (_, x_norm) = tokenizer.decode(&z_q)?;
    let x_cf = window.denormalize(&x_norm);

    let cf_window = Window::from_slice(&x_cf, window.origin_t);
    let post_scores = window_a_final(tokenizer, prior, &cf_window, config)?;

    Ok(CounterfactualResult {
        window: window.clone(),
        flags: flags.to_vec(),
        mask,
        resampled_grid,
        x_cf,
        post_scores,
    })
}

// ---------------------------------------------------------------------------
// Counterfactual CSV
// ---------------------------------------------------------------------------

fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

/// Render resampled windows as CSV rows
/// `origin_t,timestep,x_original,x_counterfactual,flagged`, LF endings.
pub fn format_counterfactual_csv(results: &[CounterfactualResult]) -> String {
    let mut out = String::from("origin_t,timestep,x_original,x_counterfactual,flagged\n");
    for r in results {
        let original = r.window.denormalize(&r.window.x);
        for i in 0..r.x_cf.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.window.origin_t,
                r.window.origin_t + i,
                sig6(original[i]),
                sig6(r.x_cf[i]),
                u8::from(r.flags[i]),
            ));
        }
    }
    out
}

pub fn write_counterfactual_csv(path: &Path, results: &[CounterfactualResult]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, format_counterfactual_csv(results))?;
    Ok(())
}
