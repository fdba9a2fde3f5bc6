use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::interval_iou;
use crate::error::{IcmError, Result};

pub const IOU_THRESHOLDS: [f64; 3] = [0.1, 0.2, 0.3];
/// Largest prediction count [`ap_bruteforce`] accepts.
pub const BRUTEFORCE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSpan {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtSpan {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

/// Confidence descending; ties broken by `(video_id, start, end)` ascending.
fn rank_order(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.start.total_cmp(&b.start))
        .then_with(|| a.end.total_cmp(&b.end))
}

fn ranked<'a>(preds: &[&'a ScoredSpan]) -> Vec<&'a ScoredSpan> {
    let mut v = preds.to_vec();
    v.sort_by(|a, b| rank_order(a, b));
    v
}

/// Best still-unmatched ground truth in the same video with IoU at least
/// `threshold`; ties go to the lower index.
fn best_match(p: &ScoredSpan, gts: &[&GtSpan], used: &[bool], threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        if used[i] || g.video_id != p.video_id || g.class != p.class {
            continue;
        }
        let iou = interval_iou((p.start, p.end), (g.start, g.end));
        if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best.map(|(i, _)| i)
}

/// All-point interpolated AP for one class. Recall is counted in matched
/// ground truths, so the area is the sum of the envelope at each hit over `n_gt`.
pub fn average_precision(preds: &[&ScoredSpan], gts: &[&GtSpan], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let order = ranked(preds);
    let mut used = vec![false; gts.len()];
    let mut hit = Vec::with_capacity(order.len());
    for p in &order {
        let m = best_match(p, gts, &used, threshold);
        if let Some(i) = m {
            used[i] = true;
        }
        hit.push(m.is_some());
    }
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (r, &h) in hit.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (r + 1) as f64);
    }
    let mut envelope = precision.clone();
    for r in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[r] = envelope[r].max(envelope[r + 1]);
    }
    let mut area = 0.0;
    for (r, &h) in hit.iter().enumerate() {
        if h {
            area += envelope[r];
        }
    }
    area / gts.len() as f64
}

/// Reference AP for small instances: for every prefix of the ranking the
/// matching is recomputed from scratch, and for each recall level `k` the
/// best precision among prefixes reaching `k` hits is taken.
pub fn ap_bruteforce(preds: &[&ScoredSpan], gts: &[&GtSpan], threshold: f64) -> Result<f64> {
    if preds.len() > BRUTEFORCE_LIMIT {
        return Err(IcmError::Domain(format!(
            "ap_bruteforce handles at most {BRUTEFORCE_LIMIT} predictions, got {}",
            preds.len()
        )));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let order = ranked(preds);
    let hits_in_prefix = |len: usize| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for p in &order[..len] {
            if let Some(i) = best_match(p, gts, &used, threshold) {
                used[i] = true;
                tp += 1;
            }
        }
        tp
    };
    let stairs: Vec<(usize, f64)> = (1..=order.len())
        .map(|len| {
            let tp = hits_in_prefix(len);
            (tp, tp as f64 / len as f64)
        })
        .collect();
    let mut area = 0.0;
    for k in 1..=gts.len() {
        let best = stairs.iter().filter(|(tp, _)| *tp >= k).map(|(_, p)| *p).fold(None, |acc: Option<f64>, p| {
            Some(acc.map_or(p, |a| a.max(p)))
        });
        if let Some(p) = best {
            area += p;
        }
    }
    Ok(area / gts.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    /// Mean AP over classes with ground truth, one per threshold.
    pub map: Vec<f64>,
    /// Per class, AP at each threshold.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    /// Mean of `map` over the thresholds.
    pub average: f64,
}

/// Class-averaged AP at each threshold. Classes without ground truth are
/// left out of the mean.
pub fn map_at_iou(preds: &[ScoredSpan], gts: &[GtSpan], thresholds: &[f64]) -> MapResult {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let p: Vec<&ScoredSpan> = preds.iter().filter(|p| p.class == c).collect();
        let g: Vec<&GtSpan> = gts.iter().filter(|g| g.class == c).collect();
        per_class.insert(c, thresholds.iter().map(|&t| average_precision(&p, &g, t)).collect::<Vec<_>>());
    }
    let map: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            if classes.is_empty() {
                0.0
            } else {
                per_class.values().map(|aps| aps[i]).sum::<f64>() / classes.len() as f64
            }
        })
        .collect();
    let average = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    MapResult {
        thresholds: thresholds.to_vec(),
        map,
        per_class,
        average,
    }
}
