//! Series ingestion and window preparation: archive text files with their
//! period metadata, z-normalized training/test windows, and a seeded
//! synthetic corpus generator for desk-scale verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Raw window std below this is treated as degenerate (constant segment)
/// and the divisor replaced by 1 to avoid blow-up.
pub const STD_GUARD: f64 = 1e-8;

/// A full univariate series with its split point, labeled anomaly
/// interval (closed, possibly one point), and period.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRecord {
    pub name: String,
    pub values: Vec<f64>,
    /// First test timestep; [0, train_end) is anomaly-free training data.
    pub train_end: usize,
    /// Closed interval [anomaly_begin, anomaly_end] inside the test split.
    pub anomaly_begin: usize,
    pub anomaly_end: usize,
    /// Dominant cycle length; windows span two periods.
    pub period: usize,
}

impl SeriesRecord {
    /// Window length T = 2P.
    pub fn window_len(&self) -> usize {
        2 * self.period
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let t_star = self.values.len();
        if self.train_end == 0 || self.train_end >= t_star {
            return Err(Error::Data(format!(
                "{}: train_end {} outside (0, {t_star})",
                self.name, self.train_end
            )));
        }
        if !(self.train_end <= self.anomaly_begin
            && self.anomaly_begin <= self.anomaly_end
            && self.anomaly_end < t_star)
        {
            return Err(Error::Data(format!(
                "{}: anomaly [{}, {}] must lie in the test split [{}, {})",
                self.name, self.anomaly_begin, self.anomaly_end, self.train_end, t_star
            )));
        }
        if self.period < 2 {
            return Err(Error::Data(format!(
                "{}: period {} must be >= 2",
                self.name, self.period
            )));
        }
        if 2 * self.period > self.train_end {
            return Err(Error::Data(format!(
                "{}: window length {} exceeds the training split {}",
                self.name,
                2 * self.period,
                self.train_end
            )));
        }
        if let Some(bad) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite value at timestep {bad}",
                self.name
            )));
        }
        Ok(())
    }
}

/// A z-normalized slice of a parent series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Normalized values, length T = 2P.
    pub x: Vec<f64>,
    /// Offset of x[0] in the parent series.
    pub origin_t: usize,
    /// Mean removed during normalization.
    pub norm_mean: f64,
    /// Divisor used during normalization (1 when the raw std was below
    /// [`STD_GUARD`]).
    pub norm_std: f64,
    /// True when the raw std was degenerate and the guard kicked in.
    pub degenerate: bool,
}

impl Window {
    /// z-normalize a raw slice.
    pub fn from_slice(raw: &[f64], origin_t: usize) -> Self {
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let raw_std = var.sqrt();
        let degenerate = raw_std < STD_GUARD;
        let std = if degenerate { 1.0 } else { raw_std };
        Window {
            x: raw.iter().map(|v| (v - mean) / std).collect(),
            origin_t,
            norm_mean: mean,
            norm_std: std,
            degenerate,
        }
    }

    /// Map normalized values back to the original scale.
    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .map(|v| v * self.norm_std + self.norm_mean)
            .collect()
    }
}

/// Which region of a series to slice into windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Half-open region [start, end) of a split.
pub fn split_region(record: &SeriesRecord, split: Split) -> (usize, usize) {
    match split {
        Split::Train => (0, record.train_end),
        Split::Test => (record.train_end, record.len()),
    }
}

/// Slice a split into z-normalized windows at the given stride.
pub fn extract_windows(
    record: &SeriesRecord,
    split: Split,
    stride: usize,
) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::Input("stride must be >= 1".into()));
    }
    let t = record.window_len();
    let (start, end) = split_region(record, split);
    if end - start < t {
        return Err(Error::Data(format!(
            "{}: {:?} split of length {} is shorter than one window ({t})",
            record.name,
            split,
            end - start
        )));
    }
    let mut windows = Vec::new();
    let mut origin = start;
    while origin + t <= end {
        windows.push(Window::from_slice(&record.values[origin..origin + t], origin));
        origin += stride;
    }
    Ok(windows)
}

/// One z-normalized window at an arbitrary origin (used by the rolling
/// scorer and the counterfactual resampler).
pub fn window_at(record: &SeriesRecord, origin: usize) -> Result<Window> {
    let t = record.window_len();
    if origin + t > record.len() {
        return Err(Error::Input(format!(
            "window at {origin} (length {t}) exceeds series length {}",
            record.len()
        )));
    }
    Ok(Window::from_slice(&record.values[origin..origin + t], origin))
}

// ---------------------------------------------------------------------------
// Archive files and period metadata
// ---------------------------------------------------------------------------

/// Parse the `name,period` CSV (header required).
pub fn load_period_table(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read period table {}: {e}", path.display())))?;
    let mut table = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line != "name,period" {
                return Err(Error::Data(format!(
                    "{}: expected header 'name,period', got '{line}'",
                    path.display()
                )));
            }
            continue;
        }
        let (name, period) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{} line {}: missing comma", path.display(), lineno + 1))
        })?;
        let period: usize = period.trim().parse().map_err(|_| {
            Error::Data(format!(
                "{} line {}: period '{period}' is not an integer",
                path.display(),
                lineno + 1
            ))
        })?;
        table.insert(name.trim().to_string(), period);
    }
    Ok(table)
}

/// Write a period table in the same format.
pub fn save_period_table(path: &Path, table: &BTreeMap<String, usize>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("name,period\n");
    for (name, period) in table {
        writeln!(out, "{name},{period}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Split an archive filename stem into (name component, train_end,
/// anomaly_begin, anomaly_end).
///
/// The convention is `<id>_UCR_Anomaly_<name>_<trainEnd>_<begin>_<end>`;
/// the three trailing underscore-separated integers carry the labels.
pub fn parse_archive_stem(stem: &str) -> Result<(String, usize, usize, usize)> {
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() < 4 {
        return Err(Error::Data(format!(
            "filename '{stem}' does not end in _<trainEnd>_<begin>_<end>"
        )));
    }
    let nums: Vec<Option<usize>> = parts[parts.len() - 3..]
        .iter()
        .map(|p| p.parse::<usize>().ok())
        .collect();
    if nums.iter().any(|n| n.is_none()) {
        return Err(Error::Data(format!(
            "filename '{stem}' does not end in three integers (_<trainEnd>_<begin>_<end>)"
        )));
    }
    // Name component: everything after the `<id>_UCR_Anomaly_` prefix and
    // before the numbers; fall back to the full remaining prefix when the
    // canonical marker is absent.
    let prefix = parts[..parts.len() - 3].to_vec();
    let name = match prefix.iter().position(|p| *p == "Anomaly") {
        Some(i) if i >= 1 && prefix[i - 1] == "UCR" => prefix[i + 1..].join("_"),
        _ => prefix.join("_"),
    };
    if name.is_empty() {
        return Err(Error::Data(format!("filename '{stem}' has an empty name component")));
    }
    Ok((
        name,
        nums[0].unwrap(),
        nums[1].unwrap(),
        nums[2].unwrap(),
    ))
}

/// Load one archive file: values one-per-line (a whitespace-separated
/// single line is tolerated), labels from the filename, period from the
/// table (keyed by full stem or by the name component).
pub fn load_ucr_dataset(path: &Path, periods: &BTreeMap<String, usize>) -> Result<SeriesRecord> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("{}: unreadable filename", path.display())))?
        .to_string();
    let (name_component, train_end, anomaly_begin, anomaly_end) = parse_archive_stem(&stem)?;
    let period = periods
        .get(&stem)
        .or_else(|| periods.get(&name_component))
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "no period entry for '{stem}' (also tried '{name_component}')"
            ))
        })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        for token in line.split_whitespace() {
            let v: f64 = token.parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {}: '{token}' is not a number",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.push(v);
        }
    }
    let record = SeriesRecord {
        name: stem,
        values,
        train_end,
        anomaly_begin,
        anomaly_end,
        period,
    };
    record.validate()?;
    Ok(record)
}

/// Write a record as an archive-convention file; returns the path.
///
/// Values are printed with Rust's shortest round-trip float formatting,
/// so save→load reproduces them bit for bit.
pub fn save_ucr_dataset(record: &SeriesRecord, dir: &Path, id: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = if record.name.contains("UCR_Anomaly") {
        record.name.clone()
    } else {
        format!(
            "{:03}_UCR_Anomaly_{}_{}_{}_{}",
            id, record.name, record.train_end, record.anomaly_begin, record.anomaly_end
        )
    };
    let path = dir.join(format!("{stem}.txt"));
    let mut out = String::with_capacity(record.values.len() * 12);
    for v in &record.values {
        writeln!(out, "{v}").expect("string write");
    }
    std::fs::write(&path, out)?;
    Ok(path)
}

/// All archive files in a directory, sorted by name.
pub fn list_archive_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// What gets injected into the anomaly interval of a synthetic series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnomalyKind {
    /// Alternating-sign burst of the given size in units of the base
    /// signal's std (>= 5 per the generator contract).
    Spike { magnitude_sigmas: f64 },
    /// Constant offset added over the interval.
    LevelShift { offset: f64 },
    /// The interval is rewritten with the base mixture at `freq_ratio`
    /// times each component frequency, same amplitudes (the equal-loudness
    /// regime where reconstruction-error detectors fail).
    FrequencyChange { freq_ratio: f64 },
    /// The interval is rewritten with a triangle wave of the same period
    /// and comparable amplitude.
    PatternSwap,
}

impl AnomalyKind {
    fn tag(&self) -> &'static str {
        match self {
            AnomalyKind::Spike { .. } => "spike",
            AnomalyKind::LevelShift { .. } => "level_shift",
            AnomalyKind::FrequencyChange { .. } => "frequency_change",
            AnomalyKind::PatternSwap => "pattern_swap",
        }
    }

    fn param(&self) -> f64 {
        match self {
            AnomalyKind::Spike { magnitude_sigmas } => *magnitude_sigmas,
            AnomalyKind::LevelShift { offset } => *offset,
            AnomalyKind::FrequencyChange { freq_ratio } => *freq_ratio,
            AnomalyKind::PatternSwap => 0.0,
        }
    }

    fn from_tag(tag: &str, param: f64) -> Result<Self> {
        match tag {
            "spike" => Ok(AnomalyKind::Spike {
                magnitude_sigmas: param,
            }),
            "level_shift" => Ok(AnomalyKind::LevelShift { offset: param }),
            "frequency_change" => Ok(AnomalyKind::FrequencyChange { freq_ratio: param }),
            "pattern_swap" => Ok(AnomalyKind::PatternSwap),
            other => Err(Error::Data(format!("unknown anomaly kind '{other}'"))),
        }
    }
}

/// Recipe for one synthetic labeled series.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub length: usize,
    pub train_end: usize,
    pub period: usize,
    /// Sinusoid mixture: cycles per timestep, one entry per component.
    pub freqs: Vec<f64>,
    /// Component amplitudes, same length as `freqs`.
    pub amps: Vec<f64>,
    /// Std of the additive Gaussian noise.
    pub noise_sd: f64,
    pub kind: AnomalyKind,
    /// Closed interval, strictly inside the test split.
    pub anomaly_begin: usize,
    pub anomaly_end: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.freqs.is_empty() || self.freqs.len() != self.amps.len() {
            return Err(Error::Input(format!(
                "{}: freqs ({}) and amps ({}) must be nonempty and equal length",
                self.name,
                self.freqs.len(),
                self.amps.len()
            )));
        }
        if !(self.anomaly_begin > self.train_end
            && self.anomaly_begin <= self.anomaly_end
            && self.anomaly_end < self.length)
        {
            return Err(Error::Input(format!(
                "{}: anomaly [{}, {}] must lie strictly inside the test split ({}, {})",
                self.name, self.anomaly_begin, self.anomaly_end, self.train_end, self.length
            )));
        }
        if let AnomalyKind::Spike { magnitude_sigmas } = self.kind {
            if magnitude_sigmas < 5.0 {
                return Err(Error::Input(format!(
                    "{}: spike magnitude {magnitude_sigmas} below the 5-sigma floor",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// One `key=value` manifest line (lists comma-separated).
    pub fn to_manifest_line(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|f| format!("{f}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "name={} length={} train_end={} period={} freqs={} amps={} noise_sd={} \
             kind={} param={} anomaly_begin={} anomaly_end={} seed={}",
            self.name,
            self.length,
            self.train_end,
            self.period,
            join(&self.freqs),
            join(&self.amps),
            self.noise_sd,
            self.kind.tag(),
            self.kind.param(),
            self.anomaly_begin,
            self.anomaly_end,
            self.seed
        )
    }

    /// Parse one manifest line.
    pub fn from_manifest_line(line: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for token in line.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest token '{token}' is not key=value")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("manifest line missing '{k}='")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("manifest field '{k}' is not an integer")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("manifest field '{k}' is not a number")))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Data(format!("manifest field '{k}' has non-number '{t}'")))
                })
                .collect()
        };
        let spec = SyntheticSpec {
            name: get("name")?,
            length: int("length")?,
            train_end: int("train_end")?,
            period: int("period")?,
            freqs: list("freqs")?,
            amps: list("amps")?,
            noise_sd: float("noise_sd")?,
            kind: AnomalyKind::from_tag(&get("kind")?, float("param")?)?,
            anomaly_begin: int("anomaly_begin")?,
            anomaly_end: int("anomaly_end")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Data("manifest field 'seed' is not an integer".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Read a corpus manifest (one spec per line; '#' comments allowed).
pub fn load_manifest(path: &Path) -> Result<Vec<SyntheticSpec>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(SyntheticSpec::from_manifest_line)
        .collect()
}

/// Write a corpus manifest.
pub fn save_manifest(path: &Path, specs: &[SyntheticSpec]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for spec in specs {
        writeln!(out, "{}", spec.to_manifest_line()).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministically generate the labeled series a spec describes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SeriesRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Input(format!("{}: bad noise_sd: {e}", spec.name)))?;
    let mixture = |t: f64, ratio: f64, origin: f64| -> f64 {
        spec.freqs
            .iter()
            .zip(&spec.amps)
            .map(|(&f, &a)| {
                // Phase-matched at the interval edge so the rewrite joins
                // the base waveform continuously.
                a * (std::f64::consts::TAU * (f * origin + f * ratio * (t - origin))).sin()
            })
            .sum()
    };
    let mut values: Vec<f64> = (0..spec.length)
        .map(|t| mixture(t as f64, 1.0, 0.0) + noise.sample(&mut rng))
        .collect();
    let base_mean = values.iter().sum::<f64>() / values.len() as f64;
    let base_sd = (values.iter().map(|v| (v - base_mean).powi(2)).sum::<f64>()
        / values.len() as f64)
        .sqrt();
    let begin = spec.anomaly_begin;
    let end = spec.anomaly_end;
    match spec.kind {
        AnomalyKind::Spike { magnitude_sigmas } => {
            for t in begin..=end {
                let sign = if (t - begin) % 2 == 0 { 1.0 } else { -1.0 };
                values[t] += sign * magnitude_sigmas * base_sd;
            }
        }
        AnomalyKind::LevelShift { offset } => {
            for value in &mut values[begin..=end] {
                *value += offset;
            }
        }
        AnomalyKind::FrequencyChange { freq_ratio } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
            for t in begin..=end {
                values[t] = mixture(t as f64, freq_ratio, begin as f64) + noise.sample(&mut rng);
            }
        }
        AnomalyKind::PatternSwap => {
            let amp = spec.amps.iter().map(|a| a.abs()).fold(0.0, f64::max);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5aa5);
            for t in begin..=end {
                let phase = ((t - begin) as f64 / spec.period as f64).fract();
                let tri = amp * (4.0 * (phase - 0.5).abs() - 1.0);
                values[t] = tri + noise.sample(&mut rng);
            }
        }
    }
    let record = SeriesRecord {
        name: spec.name.clone(),
        values,
        train_end: spec.train_end,
        anomaly_begin: begin,
        anomaly_end: end,
        period: spec.period,
    };
    record.validate()?;
    Ok(record)
}

/// The 20-series desk corpus: five seeded variants of each anomaly kind
/// over a two-component sinusoid base.
pub fn desk_corpus(seed: u64) -> Vec<SyntheticSpec> {
    let period = 64usize;
    let base_freq = 1.0 / period as f64;
    let mut specs = Vec::new();
    for (kind_idx, kind_tag) in ["spike", "level_shift", "frequency_change", "pattern_swap"]
        .iter()
        .enumerate()
    {
        for i in 0..5usize {
            let fi = i as f64;
            let kind = match *kind_tag {
                "spike" => AnomalyKind::Spike {
                    magnitude_sigmas: 6.5 + 0.3 * fi,
                },
                "level_shift" => AnomalyKind::LevelShift {
                    offset: 2.0 + 0.2 * fi,
                },
                "frequency_change" => AnomalyKind::FrequencyChange {
                    freq_ratio: 2.0 + 0.25 * fi,
                },
                _ => AnomalyKind::PatternSwap,
            };
            let width = match kind {
                AnomalyKind::Spike { .. } => 4,
                AnomalyKind::LevelShift { .. } => 64,
                _ => 128,
            };
            let begin = 1400 + 89 * i;
            specs.push(SyntheticSpec {
                name: format!("{kind_tag}{i:02}"),
                length: 1920,
                train_end: 1280,
                period,
                freqs: vec![base_freq, 3.0 * base_freq],
                amps: vec![1.0, 0.3],
                noise_sd: 0.05,
                kind,
                anomaly_begin: begin,
                anomaly_end: begin + width - 1,
                seed: seed
                    .wrapping_mul(1000)
                    .wrapping_add((kind_idx * 100 + i) as u64),
            });
        }
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_record() -> SeriesRecord {
        SeriesRecord {
            name: "demo".into(),
            values: (0..20).map(|i| i as f64).collect(),
            train_end: 10,
            anomaly_begin: 14,
            anomaly_end: 15,
            period: 2,
        }
    }

    #[test]
    fn archive_stem_parses_labels() {
        let (name, train_end, begin, end) =
            parse_archive_stem("001_UCR_Anomaly_widget_35000_52000_52620").unwrap();
        assert_eq!(name, "widget");
        assert_eq!((train_end, begin, end), (35000, 52000, 52620));
    }

    #[test]
    fn archive_stem_with_underscored_name() {
        let (name, ..) = parse_archive_stem("007_UCR_Anomaly_two_part_40_60_62").unwrap();
        assert_eq!(name, "two_part");
    }

    #[test]
    fn archive_stem_with_two_trailing_integers_rejected() {
        assert!(matches!(
            parse_archive_stem("x_UCR_Anomaly_foo_10_20"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let record = SeriesRecord {
            name: "demo".into(),
            values: (0..80).map(|i| (i as f64 * 0.37).sin() + 0.001953125).collect(),
            train_end: 40,
            anomaly_begin: 60,
            anomaly_end: 62,
            period: 10,
        };
        let path = save_ucr_dataset(&record, dir.path(), 7).unwrap();
        assert_eq!(
            path.file_name().unwrap().to_str().unwrap(),
            "007_UCR_Anomaly_demo_40_60_62.txt"
        );
        let mut periods = BTreeMap::new();
        periods.insert("demo".to_string(), 10);
        let loaded = load_ucr_dataset(&path, &periods).unwrap();
        assert_eq!(loaded.values, record.values);
        assert_eq!(loaded.train_end, 40);
        assert_eq!((loaded.anomaly_begin, loaded.anomaly_end), (60, 62));
        assert_eq!(loaded.period, 10);
        // Second round trip is exact including the name.
        let path2 = save_ucr_dataset(&loaded, dir.path(), 0).unwrap();
        let mut periods2 = BTreeMap::new();
        periods2.insert(loaded.name.clone(), 10);
        assert_eq!(load_ucr_dataset(&path2, &periods2).unwrap(), loaded);
    }

    #[test]
    fn missing_period_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let record = demo_record();
        let path = save_ucr_dataset(&record, dir.path(), 1).unwrap();
        let err = load_ucr_dataset(&path, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_numeric_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("003_UCR_Anomaly_bad_10_14_15.txt");
        std::fs::write(&path, "1.0\n2.0\nnot-a-number\n4.0\n").unwrap();
        let mut periods = BTreeMap::new();
        periods.insert("bad".to_string(), 2);
        let err = load_ucr_dataset(&path, &periods).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn single_line_whitespace_format_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("004_UCR_Anomaly_flat_10_14_15.txt");
        let values: Vec<String> = (0..20).map(|i| format!("{}.5", i)).collect();
        std::fs::write(&path, values.join(" ")).unwrap();
        let mut periods = BTreeMap::new();
        periods.insert("flat".to_string(), 3);
        let record = load_ucr_dataset(&path, &periods).unwrap();
        assert_eq!(record.len(), 20);
        assert_eq!(record.values[3], 3.5);
    }

    #[test]
    fn period_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("periods.csv");
        let mut table = BTreeMap::new();
        table.insert("a".to_string(), 64);
        table.insert("b".to_string(), 100);
        save_period_table(&path, &table).unwrap();
        assert_eq!(load_period_table(&path).unwrap(), table);
    }

    #[test]
    fn period_table_requires_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("periods.csv");
        std::fs::write(&path, "a,64\n").unwrap();
        assert!(matches!(load_period_table(&path), Err(Error::Data(_))));
    }

    #[test]
    fn window_counts_follow_stride() {
        // Train region [0, 10), T = 4: L - T + 1 = 7 windows at 0..=6.
        let record = demo_record();
        let windows = extract_windows(&record, Split::Train, 1).unwrap();
        assert_eq!(windows.len(), 7);
        assert_eq!(windows[0].origin_t, 0);
        assert_eq!(windows.last().unwrap().origin_t, 6);
        let strided = extract_windows(&record, Split::Train, 2).unwrap();
        assert_eq!(
            strided.iter().map(|w| w.origin_t).collect::<Vec<_>>(),
            vec![0, 2, 4, 6]
        );
    }

    #[test]
    fn stride_one_covers_split_exactly() {
        let record = demo_record();
        let windows = extract_windows(&record, Split::Train, 1).unwrap();
        let t = record.window_len();
        assert_eq!(windows.len(), record.train_end - t + 1);
        let mut covered = vec![false; record.train_end];
        for w in &windows {
            for i in w.origin_t..w.origin_t + t {
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn short_split_errors() {
        let mut record = demo_record();
        record.period = 6;
        // T = 12 > test split length 10.
        assert!(matches!(
            extract_windows(&record, Split::Test, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn window_normalization_stats() {
        let window = Window::from_slice(&[2.0, 4.0, 6.0, 8.0], 0);
        let mean: f64 = window.x.iter().sum::<f64>() / 4.0;
        let var: f64 = window.x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(window.norm_mean, 5.0);
        assert!(!window.degenerate);
    }

    #[test]
    fn constant_window_uses_std_guard() {
        let window = Window::from_slice(&[5.0; 4], 3);
        assert_eq!(window.x, vec![0.0; 4]);
        assert_eq!(window.norm_std, 1.0);
        assert!(window.degenerate);
        assert_eq!(window.denormalize(&window.x), vec![5.0; 4]);
    }

    #[test]
    fn denormalize_inverts_normalization() {
        let raw = [2.0, -1.0, 0.5, 3.25];
        let window = Window::from_slice(&raw, 0);
        let back = window.denormalize(&window.x);
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn demo_spec(kind: AnomalyKind) -> SyntheticSpec {
        SyntheticSpec {
            name: "t".into(),
            length: 1920,
            train_end: 1280,
            period: 64,
            freqs: vec![1.0 / 64.0, 3.0 / 64.0],
            amps: vec![1.0, 0.3],
            noise_sd: 0.05,
            kind,
            anomaly_begin: 1500,
            anomaly_end: 1530,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = demo_spec(AnomalyKind::Spike {
            magnitude_sigmas: 6.0,
        });
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spike_reaches_five_sigma() {
        let spec = demo_spec(AnomalyKind::Spike {
            magnitude_sigmas: 6.0,
        });
        let record = generate_synthetic(&spec).unwrap();
        let outside: Vec<f64> = record.values[..spec.anomaly_begin].to_vec();
        let mean = outside.iter().sum::<f64>() / outside.len() as f64;
        let sd = (outside.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / outside.len() as f64)
            .sqrt();
        let peak = record.values[spec.anomaly_begin..=spec.anomaly_end]
            .iter()
            .map(|v| (v - mean).abs())
            .fold(0.0, f64::max);
        assert!(peak >= 5.0 * sd, "peak {peak} vs 5 sigma {}", 5.0 * sd);
    }

    #[test]
    fn frequency_change_preserves_amplitude() {
        let mut spec = demo_spec(AnomalyKind::FrequencyChange { freq_ratio: 2.5 });
        spec.anomaly_end = spec.anomaly_begin + 127;
        let record = generate_synthetic(&spec).unwrap();
        let max_abs = |r: std::ops::Range<usize>| {
            record.values[r].iter().map(|v| v.abs()).fold(0.0, f64::max)
        };
        let inside = max_abs(spec.anomaly_begin..spec.anomaly_end + 1);
        let outside = max_abs(0..spec.anomaly_begin);
        let ratio = inside / outside;
        assert!(
            (0.8..=1.25).contains(&ratio),
            "amplitude ratio {ratio} outside [0.8, 1.25]"
        );
    }

    #[test]
    fn level_shift_moves_the_mean() {
        // Interval spans whole periods so the base mixture's own mean
        // cancels out of the comparison.
        let mut spec = demo_spec(AnomalyKind::LevelShift { offset: 2.0 });
        spec.anomaly_end = spec.anomaly_begin + 127;
        let record = generate_synthetic(&spec).unwrap();
        let inside = &record.values[spec.anomaly_begin..=spec.anomaly_end];
        let outside = &record.values[..spec.anomaly_begin];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let diff = mean(inside) - mean(outside);
        assert!((diff - 2.0).abs() < 0.5, "mean shift {diff}");
    }

    #[test]
    fn anomaly_outside_test_split_rejected() {
        let mut spec = demo_spec(AnomalyKind::PatternSwap);
        spec.anomaly_begin = 100;
        spec.anomaly_end = 130;
        assert!(matches!(generate_synthetic(&spec), Err(Error::Input(_))));
    }

    #[test]
    fn manifest_line_round_trip() {
        for spec in desk_corpus(3) {
            let line = spec.to_manifest_line();
            let back = SyntheticSpec::from_manifest_line(&line).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.manifest");
        let specs = desk_corpus(5);
        save_manifest(&path, &specs).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), specs);
    }

    #[test]
    fn desk_corpus_is_balanced_and_valid() {
        let specs = desk_corpus(0);
        assert_eq!(specs.len(), 20);
        for spec in &specs {
            spec.validate().unwrap();
            let record = generate_synthetic(spec).unwrap();
            record.validate().unwrap();
        }
        let spikes = specs
            .iter()
            .filter(|s| matches!(s.kind, AnomalyKind::Spike { .. }))
            .count();
        assert_eq!(spikes, 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_normalization_idempotent(values in proptest::collection::vec(-50.0..50.0f64, 8..64)) {
            let first = Window::from_slice(&values, 0);
            let second = Window::from_slice(&first.x, 0);
            for (a, b) in first.x.iter().zip(&second.x) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn prop_window_stats(values in proptest::collection::vec(-50.0..50.0f64, 8..64)) {
            let w = Window::from_slice(&values, 0);
            if !w.degenerate {
                let n = w.x.len() as f64;
                let mean = w.x.iter().sum::<f64>() / n;
                let std = (w.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }
    }
}
