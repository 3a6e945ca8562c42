//! Anomaly scoring: sliding masked latent windows over the token grid,
//! nearest-neighbor mapping back to data timesteps, rolling-window
//! accumulation across the series, aggregation over window sizes and
//! frequency bands, and the final smoothed score.
//!
//! The unit of scoring is one latent column w: the columns within α of
//! w are masked across every frequency row, the prior predicts them
//! from the surviving context, and the improbability (−log p) of the
//! tokens actually observed there becomes the score, one value per
//! frequency row. Sliding w across the grid and repeating for several α
//! (narrow windows catch point anomalies, wide ones catch distorted
//! stretches) yields latent score maps that are then projected to data
//! space and accumulated over overlapping rolling windows.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{split_region, SeriesRecord, Split, Window};
use crate::error::{Error, Result};
use crate::prior::{apply_mask, token_log_probability, LogitGrid, MaskGrid, Prior};
use crate::tokenizer::{TokenGrid, Tokenizer};

/// Latent half-width α for a window-size rate: α = max(1, ⌊r_w·W/2⌋),
/// so the masked span 2α covers roughly r_w of the W latent columns.
pub fn alpha_from_rate(rate: f64, latent_width: usize) -> usize {
    ((rate * latent_width as f64 / 2.0).floor() as usize).max(1)
}

/// Dense rows×len score matrix (frequency rows × timesteps or latent
/// columns), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub len: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(rows: usize, len: usize) -> Self {
        Self {
            rows,
            len,
            data: vec![0.0; rows * len],
        }
    }

    pub fn from_data(rows: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * len {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{len} score map",
                data.len()
            )));
        }
        Ok(Self { rows, len, data })
    }

    #[inline]
    pub fn get(&self, row: usize, i: usize) -> f64 {
        self.data[row * self.len + i]
    }

    #[inline]
    pub fn set(&mut self, row: usize, i: usize, v: f64) {
        self.data[row * self.len + i] = v;
    }

    #[inline]
    pub fn add(&mut self, row: usize, i: usize, v: f64) {
        self.data[row * self.len + i] += v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.len..(row + 1) * self.len]
    }

    /// Elementwise sum with another map of the same shape.
    pub fn add_map(&mut self, other: &ScoreMap) -> Result<()> {
        if self.rows != other.rows || self.len != other.len {
            return Err(Error::Shape(format!(
                "score map {}x{} vs {}x{}",
                self.rows, self.len, other.rows, other.len
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Mean over rows at each position.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for row in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(row)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// The masked column span for scoring position w: [w−α, w+α) ∩ [0, W).
#[inline]
fn masked_span(w: usize, alpha: usize, width: usize) -> (usize, usize) {
    (w.saturating_sub(alpha), (w + alpha).min(width))
}

/// Per-row mean of −log p over columns [lo, hi), from a row-major H×W
/// log-probability field.
fn row_negative_means(logp: &[f64], rows: usize, width: usize, lo: usize, hi: usize) -> Vec<f64> {
    let span = (hi - lo) as f64;
    (0..rows)
        .map(|row| {
            let base = row * width;
            -logp[base + lo..base + hi].iter().sum::<f64>() / span
        })
        .collect()
}

/// Score latent column `w` of grid `s`: mask columns [w−α, w+α) across
/// every frequency row, predict them from the rest, and return each
/// row's mean improbability (−log p) of the true tokens over the masked
/// span. One value per frequency row.
pub fn latent_window_score(
    prior: &Prior,
    s: &TokenGrid,
    w: usize,
    alpha: usize,
) -> Result<Vec<f64>> {
    if w >= s.w {
        return Err(Error::Input(format!(
            "latent column {w} out of range for width {}",
            s.w
        )));
    }
    if alpha == 0 {
        return Err(Error::Config("window half-width must be at least 1".into()));
    }
    let (lo, hi) = masked_span(w, alpha, s.w);
    let mut mask = MaskGrid::all_keep(s.h, s.w);
    for col in lo..hi {
        mask.mask_column(col);
    }
    let masked = apply_mask(s, &mask, prior.mask_id())?;
    let logits = prior.predict_logits(&masked)?;
    let logp = token_log_probability(&logits, s)?;
    Ok(row_negative_means(&logp, s.h, s.w, lo, hi))
}

/// Latent score maps for one token grid, one H×W map per α.
///
/// Every (α, w) masking variant is pushed through the prior in a single
/// batched forward pass; entry [:, w] of map α equals
/// [`latent_window_score`] at (w, α).
pub fn latent_score_maps(prior: &Prior, s: &TokenGrid, alphas: &[usize]) -> Result<Vec<ScoreMap>> {
    if alphas.is_empty() {
        return Err(Error::Config("no window sizes to score".into()));
    }
    if alphas.contains(&0) {
        return Err(Error::Config("window half-width must be at least 1".into()));
    }
    let (h, width) = (s.h, s.w);
    let mask_id = prior.mask_id();
    let mut variants = Vec::with_capacity(alphas.len() * width);
    let mut spans = Vec::with_capacity(alphas.len() * width);
    for &alpha in alphas {
        for w in 0..width {
            let (lo, hi) = masked_span(w, alpha, width);
            let mut mask = MaskGrid::all_keep(h, width);
            for col in lo..hi {
                mask.mask_column(col);
            }
            variants.push(apply_mask(s, &mask, mask_id)?);
            spans.push((lo, hi));
        }
    }
    let logits = prior.predict_logits_batch(&variants)?;
    let flat: Vec<f64> = logits.flatten_all()?.to_vec1()?;
    let cell = prior.k;
    let per_grid = h * width * cell;

    let mut maps = vec![ScoreMap::zeros(h, width); alphas.len()];
    for (v, &(lo, hi)) in spans.iter().enumerate() {
        let grid_logits =
            LogitGrid::from_data(h, width, cell, flat[v * per_grid..(v + 1) * per_grid].to_vec())?;
        let logp = token_log_probability(&grid_logits, s)?;
        let scores = row_negative_means(&logp, h, width, lo, hi);
        let (ai, w) = (v / width, v % width);
        for (row, &v) in scores.iter().enumerate() {
            maps[ai].set(row, w, v);
        }
    }
    Ok(maps)
}

/// Tokenize one window and compute its latent score maps (one per α).
pub fn score_window(
    tokenizer: &Tokenizer,
    prior: &Prior,
    window: &Window,
    alphas: &[usize],
) -> Result<Vec<ScoreMap>> {
    let s = tokenizer.tokenize_window(window)?;
    latent_score_maps(prior, &s, alphas)
}

/// Project a latent-rate score map onto `t` data timesteps by nearest
/// neighbor: data column i copies latent column ⌊i·W/t⌋.
pub fn map_to_data_space(latent: &ScoreMap, t: usize) -> Result<ScoreMap> {
    let w = latent.len;
    if t < w {
        return Err(Error::Shape(format!(
            "cannot map {w} latent columns onto fewer ({t}) timesteps"
        )));
    }
    let mut out = ScoreMap::zeros(latent.rows, t);
    for i in 0..t {
        let src = i * w / t;
        for row in 0..latent.rows {
            out.set(row, i, latent.get(row, src));
        }
    }
    Ok(out)
}

/// Centered moving average with truncation at the edges: each output is
/// the mean of the inputs within the window that actually exist, so the
/// edges average fewer values instead of fading toward zero.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || v.is_empty() {
        return v.to_vec();
    }
    let l = v.len();
    let left = window / 2;
    let right = window - left; // exclusive
    (0..l)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(l);
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Every stage of the anomaly score for one series' test split.
#[derive(Debug, Clone)]
pub struct ScoreBundle {
    /// Timestep of column 0 in the parent series (= start of the test split).
    pub start_t: usize,
    /// The α values scored, in window-rate order (duplicates kept).
    pub alphas: Vec<usize>,
    /// Per-α accumulated data-space maps, overlap-normalized when the
    /// config asks for it. H × L each.
    pub per_alpha: Vec<ScoreMap>,
    /// Sum over α. H × L.
    pub summed: ScoreMap,
    /// How many rolling windows covered each timestep.
    pub overlap: Vec<usize>,
    /// Mean over frequency rows of `summed`.
    pub freq_mean: Vec<f64>,
    /// `freq_mean` under a centered moving average of window T.
    pub smoothed: Vec<f64>,
    /// (freq_mean + smoothed) / 2 — the score the evaluator consumes.
    pub a_final: Vec<f64>,
}

impl ScoreBundle {
    pub fn len(&self) -> usize {
        self.a_final.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_final.is_empty()
    }
}

/// Run the full scoring pipeline over one split of a series.
///
/// Rolling windows of length T = 2P slide at stride max(1, ⌊r_stride·T⌋)
/// (a final window is pinned to the end so every timestep is covered).
/// Each window's latent score maps are projected to data space and
/// accumulated per α; each α's accumulator is divided by the overlap
/// counts (when normalization is on), the α maps are summed, averaged
/// over frequency rows, smoothed, and combined into the final score.
pub fn score_split(
    record: &SeriesRecord,
    split: Split,
    tokenizer: &Tokenizer,
    prior: &Prior,
    config: &RunConfig,
) -> Result<ScoreBundle> {
    let sc = &config.scoring;
    if sc.window_rates.is_empty() {
        return Err(Error::Config("no window-size rates configured".into()));
    }
    let t = record.window_len();
    let width = tokenizer.shape.width;
    let h = tokenizer.shape.freq_rows;
    let alphas: Vec<usize> = sc
        .window_rates
        .iter()
        .map(|&r| alpha_from_rate(r, width))
        .collect();
    let (start, end) = split_region(record, split);
    let l = end - start;
    if l < t {
        return Err(Error::Input(format!(
            "{}: split has {l} timesteps, shorter than one window ({t})",
            record.name
        )));
    }
    let stride = ((sc.stride_rate * t as f64).floor() as usize).max(1);
    if stride > t {
        return Err(Error::Config(format!(
            "stride {stride} exceeds the window length {t}; timesteps would go unscored"
        )));
    }
    let mut origins: Vec<usize> = (0..=l - t).step_by(stride).collect();
    if *origins.last().expect("at least origin 0") != l - t {
        origins.push(l - t);
    }

    let mut per_alpha = vec![ScoreMap::zeros(h, l); alphas.len()];
    let mut overlap = vec![0usize; l];
    for &origin in &origins {
        let window = Window::from_slice(&record.values[start + origin..start + origin + t], start + origin);
        let maps = score_window(tokenizer, prior, &window, &alphas)?;
        for (acc, latent) in per_alpha.iter_mut().zip(&maps) {
            let data_map = map_to_data_space(latent, t)?;
            for row in 0..h {
                for i in 0..t {
                    acc.add(row, origin + i, data_map.get(row, i));
                }
            }
        }
        for count in &mut overlap[origin..origin + t] {
            *count += 1;
        }
    }
    if sc.normalize_overlap {
        for acc in &mut per_alpha {
            for row in 0..h {
                for i in 0..l {
                    let c = overlap[i] as f64;
                    acc.set(row, i, acc.get(row, i) / c);
                }
            }
        }
    }
    let mut summed = ScoreMap::zeros(h, l);
    for acc in &per_alpha {
        summed.add_map(acc)?;
    }
    let freq_mean = summed.row_mean();
    let smoothed = moving_average(&freq_mean, t);
    let a_final: Vec<f64> = freq_mean
        .iter()
        .zip(&smoothed)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Ok(ScoreBundle {
        start_t: start,
        alphas,
        per_alpha,
        summed,
        overlap,
        freq_mean,
        smoothed,
        a_final,
    })
}

/// Score the test split (the usual case for evaluation).
pub fn score_series(
    record: &SeriesRecord,
    tokenizer: &Tokenizer,
    prior: &Prior,
    config: &RunConfig,
) -> Result<ScoreBundle> {
    score_split(record, Split::Test, tokenizer, prior, config)
}

// ---------------------------------------------------------------------------
// Score CSV
// ---------------------------------------------------------------------------

/// Format with six significant digits, scientific notation.
fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

/// Render a bundle as CSV: absolute timestep, the three aggregate score
/// stages, then one column per frequency band. LF line endings.
pub fn format_score_csv(bundle: &ScoreBundle) -> String {
    let h = bundle.summed.rows;
    let mut out = String::from("timestep,a_final,abar,abarbar");
    for row in 0..h {
        out.push_str(&format!(",band_{row}"));
    }
    out.push('\n');
    for i in 0..bundle.len() {
        out.push_str(&format!(
            "{},{},{},{}",
            bundle.start_t + i,
            sig6(bundle.a_final[i]),
            sig6(bundle.freq_mean[i]),
            sig6(bundle.smoothed[i]),
        ));
        for row in 0..h {
            out.push(',');
            out.push_str(&sig6(bundle.summed.get(row, i)));
        }
        out.push('\n');
    }
    out
}

pub fn write_score_csv(path: &Path, bundle: &ScoreBundle) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, format_score_csv(bundle))?;
    Ok(())
}

/// The columns of a score CSV needed downstream: absolute timesteps and
/// the final score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub timesteps: Vec<usize>,
    pub a_final: Vec<f64>,
}

pub fn read_score_csv(path: &Path) -> Result<ScoreSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read scores {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty score file", path.display())))?;
    let mut columns = header.split(',');
    if columns.next() != Some("timestep") || columns.next() != Some("a_final") {
        return Err(Error::Data(format!(
            "{}: unrecognized score header `{header}`",
            path.display()
        )));
    }
    let mut timesteps = Vec::new();
    let mut a_final = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (t, a) = (fields.next(), fields.next());
        let parse_err = |what: &str| {
            Error::Data(format!("{} line {}: bad {what}: `{line}`", path.display(), n + 2))
        };
        timesteps.push(
            t.and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| parse_err("timestep"))?,
        );
        a_final.push(
            a.and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| parse_err("score"))?,
        );
    }
    if timesteps.is_empty() {
        return Err(Error::Data(format!("{}: no score rows", path.display())));
    }
    Ok(ScoreSeries { timesteps, a_final })
}

/// Everything a score CSV carries, reconstructed in memory: the summary
/// curves plus the per-band map, anchored at the first absolute
/// timestep. This is the figure-rendering view of a scoring run and can
/// be rebuilt from a saved CSV without the models.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub start_t: usize,
    pub a_final: Vec<f64>,
    pub freq_mean: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Per-band scores (the α-summed map), H × L.
    pub bands: ScoreMap,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.a_final.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_final.is_empty()
    }
}

impl ScoreBundle {
    /// The persisted/plotted view of this bundle.
    pub fn table(&self) -> ScoreTable {
        ScoreTable {
            start_t: self.start_t,
            a_final: self.a_final.clone(),
            freq_mean: self.freq_mean.clone(),
            smoothed: self.smoothed.clone(),
            bands: self.summed.clone(),
        }
    }
}

/// Parse a full score CSV (every column) back into a [`ScoreTable`].
pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read scores {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty score file", path.display())))?;
    let head: Vec<&str> = header.split(',').collect();
    let band_count = head.len().saturating_sub(4);
    if head.len() < 5
        || head[..4] != ["timestep", "a_final", "abar", "abarbar"]
        || !(0..band_count).all(|b| head[4 + b] == format!("band_{b}"))
    {
        return Err(Error::Data(format!(
            "{}: unrecognized score header `{header}`",
            path.display()
        )));
    }
    let mut start_t = 0usize;
    let mut a_final = Vec::new();
    let mut freq_mean = Vec::new();
    let mut smoothed = Vec::new();
    let mut band_data: Vec<Vec<f64>> = vec![Vec::new(); band_count];
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad =
            || Error::Data(format!("{} line {}: bad row `{line}`", path.display(), n + 2));
        if fields.len() != head.len() {
            return Err(bad());
        }
        let t: usize = fields[0].parse().map_err(|_| bad())?;
        if a_final.is_empty() {
            start_t = t;
        }
        let mut parsed = fields[1..].iter().map(|v| v.parse::<f64>());
        let mut next = || parsed.next().unwrap().map_err(|_| bad());
        a_final.push(next()?);
        freq_mean.push(next()?);
        smoothed.push(next()?);
        for column in band_data.iter_mut() {
            column.push(next()?);
        }
    }
    if a_final.is_empty() {
        return Err(Error::Data(format!("{}: no score rows", path.display())));
    }
    let len = a_final.len();
    let mut bands = ScoreMap::zeros(band_count, len);
    for (b, column) in band_data.iter().enumerate() {
        for (i, &v) in column.iter().enumerate() {
            bands.set(b, i, v);
        }
    }
    Ok(ScoreTable {
        start_t,
        a_final,
        freq_mean,
        smoothed,
        bands,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use proptest::prelude::*;

    // A pocket-sized pipeline: H=2 frequency rows (n_fft=2), W=4 latent
    // columns, K=4 codes, untrained (but frozen) models.
    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::desk();
        config.spectral.n_fft = 2;
        config.spectral.hop = 1; // n_fft = 2 leaves no room for overlap
        config.tokenizer.codebook_size = 4;
        config.tokenizer.latent_dim = 6;
        config.tokenizer.target_width = 4;
        config.tokenizer.base_channels = 8;
        config.tokenizer.res_blocks = 1;
        config.prior.depth = 2;
        config.prior.width = 32;
        config.prior.heads = 4;
        config
    }

    const T: usize = 16; // window length for period 8

    fn tiny_models(config: &RunConfig) -> (Tokenizer, Prior) {
        let tokenizer = Tokenizer::new(config, T, 5).unwrap();
        assert_eq!(tokenizer.shape.width, 4);
        assert_eq!(tokenizer.shape.freq_rows, 2);
        let prior = Prior::new(config, 2, 4, 6).unwrap();
        (tokenizer, prior)
    }

    /// A prior whose head outputs all-zero logits (uniform distribution).
    fn uniform_prior(config: &RunConfig, h: usize, w: usize) -> Prior {
        let prior = Prior::new(config, h, w, 7).unwrap();
        let fc2 = prior.store().tensor("prior.head.fc2.weight").unwrap();
        prior
            .store()
            .set("prior.head.fc2.weight", &fc2.zeros_like().unwrap())
            .unwrap();
        prior
    }

    fn test_record() -> SeriesRecord {
        let period = 8usize;
        let values: Vec<f64> = (0..64)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period as f64).sin())
            .collect();
        SeriesRecord {
            name: "tiny".into(),
            values,
            train_end: 32,
            anomaly_begin: 40,
            anomaly_end: 43,
            period,
        }
    }

    #[test]
    fn alpha_formula_matches_pinned_values() {
        // Full-scale W = 32: the three default rates give 1, 4, 8.
        assert_eq!(alpha_from_rate(0.1, 32), 1);
        assert_eq!(alpha_from_rate(0.3, 32), 4);
        assert_eq!(alpha_from_rate(0.5, 32), 8);
        // Floor never drops below 1.
        assert_eq!(alpha_from_rate(0.1, 4), 1);
        assert_eq!(alpha_from_rate(0.7, 32), 11);
    }

    #[test]
    fn moving_average_examples() {
        let v = vec![3.25; 7];
        assert_eq!(moving_average(&v, 5), v); // constant is a fixed point
        assert_eq!(moving_average(&v, 1), v); // T = 1 is the identity

        let spike = vec![0.0, 0.0, 10.0, 0.0, 0.0];
        let out = moving_average(&spike, 5);
        let expected = [10.0 / 3.0, 10.0 / 4.0, 2.0, 10.0 / 4.0, 10.0 / 3.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn data_space_mapping_examples() {
        let latent = ScoreMap::from_data(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mapped = map_to_data_space(&latent, 8).unwrap();
        assert_eq!(mapped.row(0), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);

        let identity = map_to_data_space(&latent, 4).unwrap();
        assert_eq!(identity.row(0), latent.row(0));

        let three = ScoreMap::from_data(1, 3, vec![9.0, 8.0, 7.0]).unwrap();
        let mapped = map_to_data_space(&three, 8).unwrap();
        // Column indices ⌊i·3/8⌋ for i = 0..8: 0,0,0,1,1,1,2,2.
        assert_eq!(mapped.row(0), &[9.0, 9.0, 9.0, 8.0, 8.0, 8.0, 7.0, 7.0]);

        assert!(matches!(
            map_to_data_space(&latent, 3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn uniform_model_scores_ln_k_everywhere() {
        let config = tiny_config();
        let prior = uniform_prior(&config, 2, 4);
        let s = TokenGrid::from_ids(2, 4, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let ln_k = 4f64.ln();
        for w in 0..4 {
            for alpha in [1, 2] {
                let scores = latent_window_score(&prior, &s, w, alpha).unwrap();
                assert_eq!(scores.len(), 2);
                for v in scores {
                    assert!((v - ln_k).abs() < 1e-12, "w={w} alpha={alpha}: {v}");
                }
            }
        }
    }

    #[test]
    fn oversized_alpha_saturates_to_full_grid() {
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let window = Window::from_slice(&record.values[0..T], 0);
        let s = tokenizer.tokenize_window(&window).unwrap();
        // With α ≥ W every scoring position masks all columns, so the
        // result no longer depends on w.
        let a = latent_window_score(&prior, &s, 0, 4).unwrap();
        let b = latent_window_score(&prior, &s, 3, 4).unwrap();
        let c = latent_window_score(&prior, &s, 2, 17).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_window_score_rejects_bad_arguments() {
        let config = tiny_config();
        let prior = Prior::new(&config, 2, 4, 6).unwrap();
        let s = TokenGrid::filled(2, 4, 0);
        assert!(matches!(
            latent_window_score(&prior, &s, 4, 1),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            latent_window_score(&prior, &s, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn latent_maps_match_single_column_scores() {
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let window = Window::from_slice(&record.values[0..T], 0);
        let s = tokenizer.tokenize_window(&window).unwrap();
        let alphas = [1usize, 2];
        let maps = latent_score_maps(&prior, &s, &alphas).unwrap();
        assert_eq!(maps.len(), 2);
        for (ai, &alpha) in alphas.iter().enumerate() {
            for w in 0..4 {
                let single = latent_window_score(&prior, &s, w, alpha).unwrap();
                for (row, &v) in single.iter().enumerate() {
                    let batched = maps[ai].get(row, w);
                    assert!(
                        (batched - v).abs() < 1e-9,
                        "alpha={alpha} w={w} row={row}: {batched} vs {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn latent_window_score_matches_naive_oracle() {
        // Independent reference: mask by hand, recompute each masked
        // cell's softmax with explicit loops, and average.
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let window = Window::from_slice(&record.values[8..8 + T], 8);
        let s = tokenizer.tokenize_window(&window).unwrap();
        for (w, alpha) in [(0usize, 1usize), (1, 1), (2, 2), (3, 1)] {
            let got = latent_window_score(&prior, &s, w, alpha).unwrap();

            let lo = w.saturating_sub(alpha);
            let hi = (w + alpha).min(s.w);
            let mut masked = s.clone();
            for h in 0..s.h {
                for col in lo..hi {
                    masked.set(h, col, prior.mask_id());
                }
            }
            let logits = prior.predict_logits(&masked).unwrap();
            for row in 0..s.h {
                let mut total = 0.0;
                for col in lo..hi {
                    let u = logits.at(row, col);
                    let mut denom = 0.0;
                    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for &v in u {
                        denom += (v - m).exp();
                    }
                    let p = (u[s.get(row, col) as usize] - m).exp() / denom;
                    total += -p.ln();
                }
                let naive = total / (hi - lo) as f64;
                assert!(
                    (got[row] - naive).abs() < 1e-9,
                    "w={w} alpha={alpha} row={row}: {} vs {naive}",
                    got[row]
                );
            }
        }
    }

    #[test]
    fn identical_windows_score_identically_and_scale_invariantly() {
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let raw = &record.values[0..T];
        let window = Window::from_slice(raw, 0);
        let again = Window::from_slice(raw, 0);
        let doubled_raw: Vec<f64> = raw.iter().map(|v| 2.0 * v).collect();
        let doubled = Window::from_slice(&doubled_raw, 0);
        let alphas = [1usize];
        let a = score_window(&tokenizer, &prior, &window, &alphas).unwrap();
        let b = score_window(&tokenizer, &prior, &again, &alphas).unwrap();
        let c = score_window(&tokenizer, &prior, &doubled, &alphas).unwrap();
        assert_eq!(a, b);
        // Doubling the raw amplitude cancels exactly in z-normalization
        // (scaling by a power of two is lossless), so the tokens and
        // scores are bit-identical.
        assert_eq!(a, c);
    }

    #[test]
    fn score_series_shapes_overlap_and_additivity() {
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let mut config = config;
        config.scoring.window_rates = vec![0.5, 0.9];
        config.scoring.stride_rate = 0.25; // stride 4 on T = 16
        let bundle = score_series(&record, &tokenizer, &prior, &config).unwrap();

        let l = 32; // test split length
        assert_eq!(bundle.start_t, 32);
        assert_eq!(bundle.len(), l);
        assert_eq!(bundle.freq_mean.len(), l);
        assert_eq!(bundle.smoothed.len(), l);
        assert_eq!(bundle.overlap.len(), l);
        assert_eq!(bundle.per_alpha.len(), 2);

        // Overlap counts: stride 4, T 16 → interior counts near 4,
        // smaller at the edges, never zero.
        assert!(bundle.overlap.iter().all(|&c| c > 0));
        assert_eq!(bundle.overlap[0], 1);
        let interior = bundle.overlap[l / 2];
        let expected = T.div_ceil(4);
        assert!(
            (interior as i64 - expected as i64).abs() <= 1,
            "interior count {interior} vs ~{expected}"
        );
        assert!(bundle.overlap[0] < interior);

        // a*_s is exactly the elementwise sum of the per-α maps.
        let mut resummed = ScoreMap::zeros(2, l);
        for m in &bundle.per_alpha {
            resummed.add_map(m).unwrap();
        }
        assert_eq!(resummed, bundle.summed);

        // a_final = (ā*_s + ā̄*_s)/2 exactly.
        for i in 0..l {
            assert_eq!(
                bundle.a_final[i],
                (bundle.freq_mean[i] + bundle.smoothed[i]) / 2.0
            );
        }

        // Every stage is non-negative (scores are −log of probabilities).
        for m in &bundle.per_alpha {
            for row in 0..2 {
                assert!(m.row(row).iter().all(|&v| v >= 0.0));
            }
        }
        assert!(bundle.freq_mean.iter().all(|&v| v >= 0.0));
        assert!(bundle.a_final.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn uniform_model_series_score_is_constant_ln_k() {
        // With uniform logits every window contributes ln K at every
        // position; normalization, summation over a single α, frequency
        // mean, and both smoothing stages all preserve the constant.
        let mut config = tiny_config();
        config.scoring.window_rates = vec![0.5];
        config.scoring.stride_rate = 0.25;
        let tokenizer = Tokenizer::new(&config, T, 5).unwrap();
        let prior = uniform_prior(&config, 2, 4);
        let record = test_record();
        let bundle = score_series(&record, &tokenizer, &prior, &config).unwrap();
        let ln_k = 4f64.ln();
        for i in 0..bundle.len() {
            assert!((bundle.freq_mean[i] - ln_k).abs() < 1e-9);
            assert!((bundle.smoothed[i] - ln_k).abs() < 1e-9);
            assert!((bundle.a_final[i] - ln_k).abs() < 1e-9);
        }
    }

    #[test]
    fn score_series_matches_naive_oracle_at_full_stride() {
        // Non-overlapping windows (stride = T) recomputed with explicit
        // loops end to end: mask, softmax, average, nearest-neighbor map,
        // accumulate, normalize, sum, frequency mean, moving average.
        let mut config = tiny_config();
        config.scoring.window_rates = vec![0.5, 0.9]; // α = 1, 1 (dup kept)
        config.scoring.stride_rate = 1.0;
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();
        let bundle = score_series(&record, &tokenizer, &prior, &config).unwrap();

        let l = 32usize;
        let alphas = [1usize, 1];
        let mut per_alpha = vec![vec![vec![0.0f64; l]; 2]; alphas.len()];
        let mut counts = vec![0usize; l];
        for origin in [0usize, 16] {
            let window = Window::from_slice(&record.values[32 + origin..32 + origin + T], 32 + origin);
            let s = tokenizer.tokenize_window(&window).unwrap();
            for (ai, &alpha) in alphas.iter().enumerate() {
                // Latent map by single-column scoring.
                let mut latent = vec![vec![0.0f64; 4]; 2];
                for w in 0..4 {
                    let scores = latent_window_score(&prior, &s, w, alpha).unwrap();
                    for row in 0..2 {
                        latent[row][w] = scores[row];
                    }
                }
                for i in 0..T {
                    let src = i * 4 / T;
                    for row in 0..2 {
                        per_alpha[ai][row][origin + i] += latent[row][src];
                    }
                }
            }
            for c in &mut counts[origin..origin + T] {
                *c += 1;
            }
        }
        for map in &mut per_alpha {
            for row in map {
                for (v, &c) in row.iter_mut().zip(&counts) {
                    *v /= c as f64;
                }
            }
        }
        let mut freq_mean = vec![0.0f64; l];
        for i in 0..l {
            let mut total = 0.0;
            for map in &per_alpha {
                for row in map {
                    total += row[i];
                }
            }
            freq_mean[i] = total / 2.0; // mean over H = 2 rows of the α-sum
        }
        let smoothed = moving_average(&freq_mean, T);
        for i in 0..l {
            let final_naive = (freq_mean[i] + smoothed[i]) / 2.0;
            assert!(
                (bundle.a_final[i] - final_naive).abs() < 1e-6,
                "t={i}: {} vs {final_naive}",
                bundle.a_final[i]
            );
        }
    }

    #[test]
    fn score_series_rejects_bad_configs() {
        let config = tiny_config();
        let (tokenizer, prior) = tiny_models(&config);
        let record = test_record();

        let mut empty = config.clone();
        empty.scoring.window_rates = vec![];
        assert!(matches!(
            score_series(&record, &tokenizer, &prior, &empty),
            Err(Error::Config(_))
        ));

        let mut wide = config.clone();
        wide.scoring.stride_rate = 3.0; // stride 48 > T = 16
        assert!(matches!(
            score_series(&record, &tokenizer, &prior, &wide),
            Err(Error::Config(_))
        ));

        let mut short = record.clone();
        short.values.truncate(40); // test split 8 < T
        assert!(matches!(
            score_series(&short, &tokenizer, &prior, &config),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn score_csv_round_trips_and_uses_lf() {
        let bundle = ScoreBundle {
            start_t: 100,
            alphas: vec![1],
            per_alpha: vec![ScoreMap::from_data(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()],
            summed: ScoreMap::from_data(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            overlap: vec![1, 1, 1],
            freq_mean: vec![2.5, 3.5, 4.5],
            smoothed: vec![3.0, 3.5, 4.0],
            a_final: vec![2.75, 3.5, 4.25],
        };
        let text = format_score_csv(&bundle);
        assert!(text.starts_with("timestep,a_final,abar,abarbar,band_0,band_1\n"));
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        let line1 = text.lines().nth(1).unwrap();
        assert_eq!(line1, "100,2.75000e0,2.50000e0,3.00000e0,1.00000e0,4.00000e0");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_score_csv(&path, &bundle).unwrap();
        let parsed = read_score_csv(&path).unwrap();
        assert_eq!(parsed.timesteps, vec![100, 101, 102]);
        for (a, b) in parsed.a_final.iter().zip(&bundle.a_final) {
            assert!((a - b).abs() < 1e-5);
        }

        // Re-rendering the same bundle is byte-identical.
        assert_eq!(text, format_score_csv(&bundle));
    }

    #[test]
    fn full_table_reader_recovers_every_column() {
        let bundle = ScoreBundle {
            start_t: 100,
            alphas: vec![1],
            per_alpha: vec![ScoreMap::from_data(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()],
            summed: ScoreMap::from_data(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            overlap: vec![1, 1, 1],
            freq_mean: vec![2.5, 3.5, 4.5],
            smoothed: vec![3.0, 3.5, 4.0],
            a_final: vec![2.75, 3.5, 4.25],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_score_csv(&path, &bundle).unwrap();

        let table = read_score_table(&path).unwrap();
        // Every fixture value is exactly representable at six significant
        // digits, so the round trip is exact.
        assert_eq!(table, bundle.table());

        let missing_band = dir.path().join("short.csv");
        std::fs::write(
            &missing_band,
            "timestep,a_final,abar,abarbar,band_0\n5,1,1,1\n",
        )
        .unwrap();
        assert!(matches!(read_score_table(&missing_band), Err(Error::Data(_))));

        let no_bands = dir.path().join("none.csv");
        std::fs::write(&no_bands, "timestep,a_final,abar,abarbar\n5,1,1,1\n").unwrap();
        assert!(matches!(read_score_table(&no_bands), Err(Error::Data(_))));
    }

    #[test]
    fn read_score_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let bad_header = dir.path().join("bad.csv");
        std::fs::write(&bad_header, "time,stuff\n1,2\n").unwrap();
        assert!(matches!(read_score_csv(&bad_header), Err(Error::Data(_))));

        let bad_row = dir.path().join("row.csv");
        std::fs::write(&bad_row, "timestep,a_final\n1,not-a-number\n").unwrap();
        assert!(matches!(read_score_csv(&bad_row), Err(Error::Data(_))));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "timestep,a_final\n").unwrap();
        assert!(matches!(read_score_csv(&empty), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn moving_average_stays_within_min_max(
            v in proptest::collection::vec(-50.0f64..50.0, 1..40),
            window in 1usize..10,
        ) {
            let out = moving_average(&v, window);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.len(), v.len());
            for o in out {
                prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
            }
        }

        #[test]
        fn data_space_mapping_partitions_contiguously(
            w in 1usize..6,
            extra in 0usize..20,
        ) {
            let t = w + extra;
            let latent = ScoreMap::from_data(1, w, (0..w).map(|i| i as f64).collect()).unwrap();
            let mapped = map_to_data_space(&latent, t).unwrap();
            // Values are non-decreasing (source columns ascend) and every
            // latent column appears at least once.
            let row = mapped.row(0);
            for pair in row.windows(2) {
                prop_assert!(pair[1] >= pair[0]);
            }
            for i in 0..w {
                prop_assert!(row.contains(&(i as f64)));
            }
        }

        #[test]
        fn masked_span_width_is_clamped(
            w in 0usize..32,
            alpha in 1usize..20,
        ) {
            let (lo, hi) = masked_span(w, alpha, 32);
            prop_assert!(lo <= w && w < hi || hi == 32);
            prop_assert!(hi <= 32);
            prop_assert!(hi - lo >= 1);
            prop_assert!(hi - lo <= 2 * alpha);
        }
    }
}
