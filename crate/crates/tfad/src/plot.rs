//! Static SVG figures: a stacked panel view of one dataset — the raw
//! series with its labeled anomaly interval, the per-band score map
//! clipped at the threshold, the final score with the threshold line,
//! and (when any were produced) counterfactual overlays on the flagged
//! windows. Written by hand so the output has no rendering
//! dependencies; every figure is a plain standalone `.svg` file.

use std::path::Path;

use crate::counterfactual::CounterfactualResult;
use crate::data::SeriesRecord;
use crate::error::Result;
use crate::scoring::ScoreTable;

const PANEL_WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 140.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const PANEL_GAP: f64 = 34.0;
/// Maximum polyline points / heat columns per panel; longer series are
/// bucketed (max within each bucket, so spikes survive).
const MAX_COLUMNS: usize = 900;

/// One counterfactual curve pair for the overlay panel, in original
/// (denormalized) units. Built from a live [`CounterfactualResult`] or
/// re-read from a saved counterfactual CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    /// Timestep of the window's first value in the parent series.
    pub origin_t: usize,
    /// The window as observed.
    pub original: Vec<f64>,
    /// The resampled "likely normal" version.
    pub resampled: Vec<f64>,
}

impl From<&CounterfactualResult> for Overlay {
    fn from(cf: &CounterfactualResult) -> Self {
        Overlay {
            origin_t: cf.window.origin_t,
            original: cf.window.denormalize(&cf.window.x),
            resampled: cf.x_cf.clone(),
        }
    }
}

/// Map data values to panel-local y pixels (top = max).
struct YScale {
    lo: f64,
    span: f64,
}

impl YScale {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            span: (hi - lo) * 1.1,
        }
    }

    fn y(&self, v: f64, panel_top: f64) -> f64 {
        panel_top + PANEL_HEIGHT * (1.0 - (v - self.lo) / self.span)
    }
}

/// Reduce a series to at most [`MAX_COLUMNS`] points, keeping each
/// bucket's extreme so narrow spikes stay visible.
fn bucket_max(values: &[f64]) -> Vec<(f64, f64)> {
    let l = values.len();
    if l <= MAX_COLUMNS {
        return values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
    }
    let mut out = Vec::with_capacity(MAX_COLUMNS);
    for b in 0..MAX_COLUMNS {
        let lo = b * l / MAX_COLUMNS;
        let hi = ((b + 1) * l / MAX_COLUMNS).max(lo + 1);
        let extreme = values[lo..hi]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, |a, v| if v.abs() > a.abs() { v } else { a });
        out.push(((lo + hi - 1) as f64 / 2.0, extreme));
    }
    out
}

fn x_pixel(index: f64, len: usize) -> f64 {
    let usable = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    MARGIN_LEFT + usable * index / (len.max(2) - 1) as f64
}

fn polyline(points: &[(f64, f64)], color: &str, width: f64) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.1},{y:.1}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn panel_frame(top: f64, title: &str) -> String {
    format!(
        "<rect x=\"{MARGIN_LEFT}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{PANEL_HEIGHT}\" \
         fill=\"none\" stroke=\"#888\" stroke-width=\"0.8\"/>\n\
         <text x=\"{MARGIN_LEFT}\" y=\"{:.1}\" font-size=\"12\" fill=\"#333\" \
         font-family=\"sans-serif\">{title}</text>\n",
        PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        top - 6.0,
    )
}

/// Blue → yellow → red ramp over [0, 1].
fn heat_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (40.0 + 215.0 * u, 60.0 + 180.0 * u, 150.0 - 100.0 * u)
    } else {
        let u = (t - 0.5) * 2.0;
        (255.0, 240.0 - 190.0 * u, 50.0 - 20.0 * u)
    };
    format!("rgb({},{},{})", r as u8, g as u8, b as u8)
}

/// Render the stacked figure for one dataset. Panels: series + label,
/// per-band scores clipped at the threshold, final score + threshold,
/// and counterfactual overlays (omitted when `overlays` is empty). All
/// panels share the series' x axis.
pub fn render_figure(
    record: &SeriesRecord,
    scores: &ScoreTable,
    threshold: Option<f64>,
    overlays: &[Overlay],
) -> String {
    let rows = if overlays.is_empty() { 3 } else { 4 };
    let total_height = MARGIN_TOP + rows as f64 * (PANEL_HEIGHT + PANEL_GAP);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL_WIDTH}\" height=\"{total_height:.0}\" \
         viewBox=\"0 0 {PANEL_WIDTH} {total_height:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );

    // Panel 1: the raw series with the labeled interval shaded.
    let top = MARGIN_TOP;
    svg.push_str(&panel_frame(top, &format!("{} — series and label", record.name)));
    let l = record.len();
    let begin_x = x_pixel(record.anomaly_begin as f64, l);
    let end_x = x_pixel(record.anomaly_end as f64, l).max(begin_x + 1.5);
    svg.push_str(&format!(
        "<rect x=\"{begin_x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{PANEL_HEIGHT}\" \
         fill=\"#f4c2c2\" opacity=\"0.7\"/>\n",
        end_x - begin_x,
    ));
    let split_x = x_pixel(record.train_end as f64, l);
    svg.push_str(&format!(
        "<line x1=\"{split_x:.1}\" y1=\"{top:.1}\" x2=\"{split_x:.1}\" y2=\"{:.1}\" \
         stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
        top + PANEL_HEIGHT,
    ));
    let scale = YScale::fit(record.values.iter().cloned());
    let points: Vec<(f64, f64)> = bucket_max(&record.values)
        .into_iter()
        .map(|(i, v)| (x_pixel(i, l), scale.y(v, top)))
        .collect();
    svg.push_str(&polyline(&points, "#1f4e9c", 1.0));

    // Panel 2: per-band score heat map over the scored region, clipped
    // at the threshold so everything above it saturates.
    let top = MARGIN_TOP + PANEL_HEIGHT + PANEL_GAP;
    svg.push_str(&panel_frame(top, "per-band scores (clipped at threshold)"));
    let bands = scores.bands.rows;
    let score_len = scores.len();
    let clip = threshold.unwrap_or_else(|| {
        scores
            .a_final
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(1e-12)
    });
    let columns = score_len.min(MAX_COLUMNS);
    let band_height = PANEL_HEIGHT / bands as f64;
    for band in 0..bands {
        let row = scores.bands.row(band);
        for c in 0..columns {
            let lo = c * score_len / columns;
            let hi = ((c + 1) * score_len / columns).max(lo + 1);
            let v = row[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let color = heat_color(v / clip);
            // Share the series panel's x axis so scored columns sit
            // under the test region; low band at the bottom, like a
            // spectrogram.
            let x0 = x_pixel((scores.start_t + lo) as f64, l);
            let x1 = x_pixel((scores.start_t + hi) as f64, l);
            let y = top + PANEL_HEIGHT - (band + 1) as f64 * band_height;
            svg.push_str(&format!(
                "<rect x=\"{x0:.1}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{band_height:.1}\" fill=\"{color}\"/>\n",
                (x1 - x0).max(0.1) + 0.05,
            ));
        }
    }

    // Panel 3: the final score with the threshold line.
    let top = MARGIN_TOP + 2.0 * (PANEL_HEIGHT + PANEL_GAP);
    svg.push_str(&panel_frame(top, "final anomaly score"));
    let scale = YScale::fit(scores.a_final.iter().cloned().chain(threshold));
    let points: Vec<(f64, f64)> = bucket_max(&scores.a_final)
        .into_iter()
        .map(|(i, v)| (x_pixel(scores.start_t as f64 + i, l), scale.y(v, top)))
        .collect();
    svg.push_str(&polyline(&points, "#b03030", 1.2));
    if let Some(t) = threshold {
        let y = scale.y(t, top);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#555\" stroke-dasharray=\"6 3\"/>\n",
            PANEL_WIDTH - MARGIN_RIGHT,
        ));
    }

    // Panel 4: counterfactual overlays, one curve pair per resampled
    // window, positioned at the window's place in the series.
    if !overlays.is_empty() {
        let top = MARGIN_TOP + 3.0 * (PANEL_HEIGHT + PANEL_GAP);
        svg.push_str(&panel_frame(top, "counterfactual (likely normal) overlay"));
        let all_values = overlays
            .iter()
            .flat_map(|o| o.original.iter().chain(&o.resampled).cloned());
        let scale = YScale::fit(all_values);
        for overlay in overlays {
            let curve = |values: &[f64]| -> Vec<(f64, f64)> {
                values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (x_pixel((overlay.origin_t + i) as f64, l), scale.y(v, top)))
                    .collect()
            };
            svg.push_str(&polyline(&curve(&overlay.original), "#1f4e9c", 1.0));
            svg.push_str(&polyline(&curve(&overlay.resampled), "#e8842c", 1.4));
        }
    }

    svg.push_str("</svg>\n");
    svg
}

pub fn write_figure(
    path: &Path,
    record: &SeriesRecord,
    scores: &ScoreTable,
    threshold: Option<f64>,
    overlays: &[Overlay],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, render_figure(record, scores, threshold, overlays))?;
    Ok(())
}

/// Rebuild overlay curves from a saved counterfactual CSV
/// (`origin_t,timestep,x_original,x_counterfactual,flagged`). Rows with
/// the same origin are grouped in file order; an empty file (header
/// only) yields no overlays.
pub fn read_overlay_csv(path: &Path) -> Result<Vec<Overlay>> {
    use crate::error::Error;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty counterfactual file", path.display())))?;
    if !header.starts_with("origin_t,timestep,x_original,x_counterfactual") {
        return Err(Error::Data(format!(
            "{}: unrecognized counterfactual header `{header}`",
            path.display()
        )));
    }
    let mut overlays: Vec<Overlay> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{} line {}: bad row `{line}`", path.display(), n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(bad());
        }
        let origin_t: usize = fields[0].parse().map_err(|_| bad())?;
        let timestep: usize = fields[1].parse().map_err(|_| bad())?;
        let original: f64 = fields[2].parse().map_err(|_| bad())?;
        let resampled: f64 = fields[3].parse().map_err(|_| bad())?;
        match overlays.last_mut() {
            // Consecutive rows of one window extend the current curves;
            // a repeated origin later in the file starts a new overlay
            // (several trials of the same window stay distinct).
            Some(o) if o.origin_t == origin_t && origin_t + o.original.len() == timestep => {
                o.original.push(original);
                o.resampled.push(resampled);
            }
            _ => overlays.push(Overlay {
                origin_t,
                original: vec![original],
                resampled: vec![resampled],
            }),
        }
    }
    Ok(overlays)
}
