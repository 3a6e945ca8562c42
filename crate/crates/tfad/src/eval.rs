//! Archive evaluation protocol: a dataset counts as solved when a
//! predicted anomaly location falls within ±100 timesteps of the
//! labeled interval. Top-1 uses the score argmax; top-3/5 admit the k
//! highest score peaks (local maxima, deduplicated so one anomaly
//! cannot occupy several slots), and per-dataset 0/1 correctness is
//! averaged over the archive.

use crate::error::{Error, Result};

/// Slack around the labeled interval, in timesteps (inclusive).
pub const LOCATION_TOLERANCE: usize = 100;

/// Earliest index of the maximum score.
pub fn top1_location(a_final: &[f64]) -> Result<usize> {
    if a_final.is_empty() {
        return Err(Error::Input("no scores to locate a maximum in".into()));
    }
    let mut best = 0;
    for (i, &v) in a_final.iter().enumerate() {
        if v > a_final[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Strict local maxima: i is a peak iff a[i] > a[i−1] and a[i] > a[i+1].
/// A plateau counts once, reported at its leftmost index, and only when
/// it both rises on the left and falls on the right; series ends never
/// qualify. Ascending order.
pub fn find_local_maxima(a_final: &[f64]) -> Vec<usize> {
    let l = a_final.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 <= l.saturating_sub(1) {
        if a_final[i] > a_final[i - 1] {
            // Walk the plateau of equal values starting at i.
            let mut j = i;
            while j + 1 < l && a_final[j + 1] == a_final[i] {
                j += 1;
            }
            if j + 1 < l && a_final[j + 1] < a_final[i] {
                peaks.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

/// The k most anomalous locations: score peaks (plus the global argmax,
/// which a strictly-rising edge or an unfalling plateau can keep out of
/// the peak set) ranked by descending score, then the remaining indices
/// as fallback when peaks run out. A candidate closer than
/// [`LOCATION_TOLERANCE`] to an already-selected location is skipped so
/// a single anomaly cannot fill several slots. Ties rank the earlier
/// timestep first.
pub fn top_locations(a_final: &[f64], k: usize) -> Vec<usize> {
    if a_final.is_empty() || k == 0 {
        return Vec::new();
    }
    let argmax = top1_location(a_final).expect("nonempty");
    let mut is_primary = vec![false; a_final.len()];
    for &p in &find_local_maxima(a_final) {
        is_primary[p] = true;
    }
    is_primary[argmax] = true;

    let by_score_desc = |pool: &mut Vec<usize>| {
        pool.sort_by(|&x, &y| {
            a_final[y]
                .partial_cmp(&a_final[x])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| x.cmp(&y))
        });
    };
    let mut primary: Vec<usize> = (0..a_final.len()).filter(|&i| is_primary[i]).collect();
    let mut fallback: Vec<usize> = (0..a_final.len()).filter(|&i| !is_primary[i]).collect();
    by_score_desc(&mut primary);
    by_score_desc(&mut fallback);

    let mut selected: Vec<usize> = Vec::with_capacity(k);
    for cand in primary.into_iter().chain(fallback) {
        if selected.len() == k {
            break;
        }
        let crowded = selected
            .iter()
            .any(|&s| s.abs_diff(cand) < LOCATION_TOLERANCE);
        if !crowded {
            selected.push(cand);
        }
    }
    selected
}

/// Whether a location lies within the tolerance-widened label interval
/// [begin − 100, end + 100], inclusive at both ends.
pub fn hits_interval(location: usize, begin: usize, end: usize) -> bool {
    location >= begin.saturating_sub(LOCATION_TOLERANCE) && location <= end + LOCATION_TOLERANCE
}

/// 1 iff any of the top-k locations hits the labeled interval.
pub fn topk_correct(a_final: &[f64], k: usize, begin: usize, end: usize) -> bool {
    top_locations(a_final, k)
        .iter()
        .any(|&loc| hits_interval(loc, begin, end))
}

/// One dataset's evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    /// Up to five predicted locations as absolute timesteps, most
    /// anomalous first.
    pub locations: Vec<usize>,
    pub top1: bool,
    pub top3: bool,
    pub top5: bool,
    /// Wall time of the scoring run that produced the scores (recorded
    /// by that run, not measured here).
    pub runtime_s: f64,
}

/// Evaluate one dataset: scores start at absolute timestep `start_t`,
/// the labeled anomaly is the closed interval [begin, end].
pub fn evaluate_dataset(
    dataset: &str,
    a_final: &[f64],
    start_t: usize,
    begin: usize,
    end: usize,
    runtime_s: f64,
) -> Result<EvalResult> {
    if a_final.is_empty() {
        return Err(Error::Input(format!("{dataset}: no scores to evaluate")));
    }
    let locations: Vec<usize> = top_locations(a_final, 5)
        .into_iter()
        .map(|i| start_t + i)
        .collect();
    let hit_within = |n: usize| {
        locations
            .iter()
            .take(n)
            .any(|&loc| hits_interval(loc, begin, end))
    };
    let (top1, top3, top5) = (hit_within(1), hit_within(3), hit_within(5));
    Ok(EvalResult {
        dataset: dataset.to_string(),
        locations,
        top1,
        top3,
        top5,
        runtime_s,
    })
}

/// Archive-level accuracy: per-k means over datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveSummary {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub results: Vec<EvalResult>,
}

pub fn evaluate_archive(results: Vec<EvalResult>) -> Result<ArchiveSummary> {
    if results.is_empty() {
        return Err(Error::Input("no datasets to summarize".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &results {
        if !seen.insert(r.dataset.as_str()) {
            return Err(Error::Input(format!(
                "dataset {} appears more than once",
                r.dataset
            )));
        }
    }
    let n = results.len() as f64;
    let mean = |f: fn(&EvalResult) -> bool| results.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(ArchiveSummary {
        top1: mean(|r| r.top1),
        top3: mean(|r| r.top3),
        top5: mean(|r| r.top5),
        results,
    })
}

/// Per-dataset CSV:
/// `dataset,top1,top3,top5,pred1,pred2,pred3,pred4,pred5,runtime_s`,
/// missing predictions left empty, LF endings.
pub fn format_summary_csv(summary: &ArchiveSummary) -> String {
    let mut out = String::from("dataset,top1,top3,top5,pred1,pred2,pred3,pred4,pred5,runtime_s\n");
    for r in &summary.results {
        out.push_str(&format!(
            "{},{},{},{}",
            r.dataset,
            u8::from(r.top1),
            u8::from(r.top3),
            u8::from(r.top5)
        ));
        for slot in 0..5 {
            out.push(',');
            if let Some(loc) = r.locations.get(slot) {
                out.push_str(&loc.to_string());
            }
        }
        out.push_str(&format!(",{:.3}\n", r.runtime_s));
    }
    out
}

pub fn write_summary_csv(path: &std::path::Path, summary: &ArchiveSummary) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, format_summary_csv(summary))?;
    Ok(())
}
