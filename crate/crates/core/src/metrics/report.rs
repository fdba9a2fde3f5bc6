use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::interchange::{parse_ground_truth, parse_predictions, GroundTruthFile, IntervalRecord, PredictionFile};
use super::map::{map_at_iou, GtSpan, ScoredSpan, IOU_THRESHOLDS};
use super::text::{cosine, rouge_l_f1, sem_c, tokens};
use super::{accuracy, f2_score, fnr, overlap, sen_a};
use crate::error::{IcmError, Result};
use crate::fsutil;

pub const REPORT_FORMAT: &str = "icm-metrics-report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub gt_intervals: usize,
    pub predicted_intervals: usize,
    /// AP at 0.1, 0.2, 0.3; absent for classes without ground truth.
    pub ap: Option<Vec<f64>>,
    pub gt_segments: usize,
    pub predicted_segments: usize,
    pub segment_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub videos: usize,
    pub segments: usize,
    pub gt_intervals: usize,
    pub predicted_intervals: usize,
    pub acc: f64,
    pub f2: f64,
    /// Absent when no segment carries sentiment.
    pub fnr: Option<f64>,
    #[serde(rename = "map@0.1")]
    pub map_01: f64,
    #[serde(rename = "map@0.2")]
    pub map_02: f64,
    #[serde(rename = "map@0.3")]
    pub map_03: f64,
    pub map_avg: f64,
    pub sem_r: Option<f64>,
    pub sem_c: Option<f64>,
    pub sen_a: Option<f64>,
    /// Imported from the ground-truth header when an external judge scored it.
    pub atr_r: Option<f64>,
    pub per_class: BTreeMap<String, ClassBreakdown>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| IcmError::Data(format!("encoding report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn map(&self) -> [f64; 3] {
        [self.map_01, self.map_02, self.map_03]
    }
}

fn by_position(a: &IntervalRecord, b: &IntervalRecord) -> Ordering {
    a.video_id
        .cmp(&b.video_id)
        .then_with(|| a.start_s.total_cmp(&b.start_s))
        .then_with(|| a.end_s.total_cmp(&b.end_s))
        .then_with(|| a.class.cmp(&b.class))
        .then_with(|| b.confidence.total_cmp(&a.confidence))
        .then_with(|| a.claim().cmp(b.claim()))
        .then_with(|| a.cause_text.cmp(&b.cause_text))
}

/// Class index of the segment whose midpoint lies at `t`: the most confident
/// covering interval, earliest first on ties; background when none covers.
fn label_at(t: f64, intervals: &[(&IntervalRecord, usize)], normal: usize) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (r, c) in intervals {
        if r.start_s <= t && t < r.end_s && best.is_none_or(|(conf, _)| r.confidence > conf) {
            best = Some((r.confidence, *c));
        }
    }
    best.map_or(normal, |(_, c)| c)
}

/// Interval in `pool` with the largest overlap with `(s, e)`; earliest on
/// ties, `None` when nothing overlaps.
fn max_overlap<'a>(s: f64, e: f64, pool: &[&'a IntervalRecord]) -> Option<&'a IntervalRecord> {
    let mut best: Option<(f64, &IntervalRecord)> = None;
    for r in pool {
        let o = overlap((s, e), (r.start_s, r.end_s));
        if o > 0.0 && best.is_none_or(|(b, _)| o > b) {
            best = Some((o, r));
        }
    }
    best.map(|(_, r)| r)
}

pub fn evaluate(preds: &PredictionFile, gt: &GroundTruthFile) -> Result<MetricsReport> {
    let classes = gt.classes();
    if let Some(pc) = preds.header.as_ref().and_then(|h| h.classes.as_ref()) {
        if pc.as_slice() != classes {
            return Err(IcmError::Incompatible("prediction and ground-truth class sets differ".into()));
        }
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let class_of = |name: &str, what: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| IcmError::Data(format!("{what} names unknown class {name:?}")))
    };
    let normal = class_of(gt.normal_class(), "header")?;
    let ss = gt.segment_seconds();

    let mut videos: Vec<_> = gt.videos().iter().collect();
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let lengths: HashMap<&str, usize> = videos.iter().map(|v| (v.video_id.as_str(), v.segments)).collect();
    if lengths.len() != videos.len() {
        return Err(IcmError::Data("ground-truth header lists a video twice".into()));
    }

    let mut gts: Vec<(&IntervalRecord, usize)> = Vec::new();
    for r in &gt.records {
        let len = lengths
            .get(r.video_id.as_str())
            .ok_or_else(|| IcmError::Data(format!("ground truth names unlisted video {:?}", r.video_id)))?;
        if r.end_s > *len as f64 * ss + 1e-9 {
            return Err(IcmError::Data(format!("interval ends at {} past the end of {:?}", r.end_s, r.video_id)));
        }
        gts.push((r, class_of(&r.class, "ground truth")?));
    }
    let mut pred: Vec<(&IntervalRecord, usize)> = Vec::new();
    for r in &preds.records {
        if !lengths.contains_key(r.video_id.as_str()) {
            return Err(IcmError::Data(format!("prediction names unknown video {:?}", r.video_id)));
        }
        pred.push((r, class_of(&r.class, "prediction")?));
        class_of(r.claim(), "class_claim")?;
    }
    gts.sort_by(|a, b| by_position(a.0, b.0));
    pred.sort_by(|a, b| by_position(a.0, b.0));

    let mut per_video_gt: HashMap<&str, Vec<(&IntervalRecord, usize)>> = HashMap::new();
    for g in &gts {
        per_video_gt.entry(g.0.video_id.as_str()).or_default().push(*g);
    }
    let mut per_video_pred: HashMap<&str, Vec<(&IntervalRecord, usize)>> = HashMap::new();
    for p in &pred {
        per_video_pred.entry(p.0.video_id.as_str()).or_default().push(*p);
    }

    // Segment-level labels in sorted video order.
    let mut true_labels = Vec::new();
    let mut pred_labels = Vec::new();
    for v in &videos {
        let g = per_video_gt.get(v.video_id.as_str()).map_or(&[][..], |x| x.as_slice());
        let p = per_video_pred.get(v.video_id.as_str()).map_or(&[][..], |x| x.as_slice());
        for k in 0..v.segments {
            let mid = (k as f64 + 0.5) * ss;
            true_labels.push(label_at(mid, g, normal));
            pred_labels.push(label_at(mid, p, normal));
        }
    }
    if true_labels.is_empty() {
        return Err(IcmError::Data("ground truth covers no segments".into()));
    }
    let acc = accuracy(&pred_labels, &true_labels)?;
    let tb: Vec<bool> = true_labels.iter().map(|&c| c != normal).collect();
    let pb: Vec<bool> = pred_labels.iter().map(|&c| c != normal).collect();
    let f2 = f2_score(&pb, &tb)?;
    let fnr = fnr(&pb, &tb)?;

    let scored: Vec<ScoredSpan> = pred
        .iter()
        .map(|(r, c)| ScoredSpan {
            video_id: r.video_id.clone(),
            start: r.start_s,
            end: r.end_s,
            class: *c,
            confidence: r.confidence,
        })
        .collect();
    let spans: Vec<GtSpan> = gts
        .iter()
        .map(|(r, c)| GtSpan {
            video_id: r.video_id.clone(),
            start: r.start_s,
            end: r.end_s,
            class: *c,
        })
        .collect();
    let map = map_at_iou(&scored, &spans, &IOU_THRESHOLDS);

    // Attribution text, scored per ground-truth interval.
    let mut rouge = Vec::new();
    let mut cos = Vec::new();
    for (g, _) in &gts {
        let pool: Vec<&IntervalRecord> =
            per_video_pred.get(g.video_id.as_str()).map_or(Vec::new(), |x| x.iter().map(|(r, _)| *r).collect());
        if tokens(&g.cause_text).is_empty() {
            continue;
        }
        match max_overlap(g.start_s, g.end_s, &pool) {
            Some(p) => {
                rouge.push(rouge_l_f1(&p.cause_text, &g.cause_text).unwrap_or(0.0));
                cos.push(match (&p.embedding, &g.embedding) {
                    (Some(a), Some(b)) => cosine(a, b).clamp(0.0, 1.0),
                    _ => sem_c(&p.cause_text, &g.cause_text),
                });
            }
            None => {
                rouge.push(0.0);
                cos.push(0.0);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let mut claims = Vec::with_capacity(pred.len());
    for (p, _) in &pred {
        let pool: Vec<&IntervalRecord> =
            per_video_gt.get(p.video_id.as_str()).map_or(Vec::new(), |x| x.iter().map(|(r, _)| *r).collect());
        let truth = max_overlap(p.start_s, p.end_s, &pool).map_or(Ok(normal), |g| class_of(&g.class, "ground truth"))?;
        claims.push((class_of(p.claim(), "class_claim")?, Some(truth)));
    }

    let mut per_class = BTreeMap::new();
    for (c, name) in classes.iter().enumerate() {
        if c == normal {
            continue;
        }
        let b = ClassBreakdown {
            gt_intervals: gts.iter().filter(|(_, k)| *k == c).count(),
            predicted_intervals: pred.iter().filter(|(_, k)| *k == c).count(),
            ap: map.per_class.get(&c).cloned(),
            gt_segments: true_labels.iter().filter(|&&k| k == c).count(),
            predicted_segments: pred_labels.iter().filter(|&&k| k == c).count(),
            segment_hits: true_labels.iter().zip(&pred_labels).filter(|(t, p)| **t == c && **p == c).count(),
        };
        if b.gt_intervals + b.predicted_intervals + b.gt_segments + b.predicted_segments > 0 {
            per_class.insert(name.clone(), b);
        }
    }

    Ok(MetricsReport {
        format: REPORT_FORMAT.into(),
        videos: videos.len(),
        segments: true_labels.len(),
        gt_intervals: gts.len(),
        predicted_intervals: pred.len(),
        acc,
        f2,
        fnr,
        map_01: map.map[0],
        map_02: map.map[1],
        map_03: map.map[2],
        map_avg: map.average,
        sem_r: mean(&rouge),
        sem_c: mean(&cos),
        sen_a: sen_a(&claims),
        atr_r: gt.header.atr_r,
        per_class,
    })
}

pub fn evaluate_files(predictions: &Path, ground_truth: &Path) -> Result<MetricsReport> {
    let utf8 = |p: &Path| -> Result<String> {
        String::from_utf8(fsutil::read(p)?).map_err(|_| IcmError::Data(format!("{} is not UTF-8", p.display())))
    };
    let preds = parse_predictions(&utf8(predictions)?)?;
    let gt = parse_ground_truth(&utf8(ground_truth)?)?;
    evaluate(&preds, &gt)
}
