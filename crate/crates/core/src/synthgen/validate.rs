use std::collections::BTreeMap;

use serde::Serialize;

use crate::synthgen::{Channel, GeneratorConfig, Prototypes, VideoSample};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IntervalStats {
    pub count: usize,
    pub mean_segments: f64,
    pub max_segments: usize,
    pub sentiment_segment_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub videos: usize,
    pub segments: usize,
    pub violations: Vec<String>,
    /// Segment counts for every class of the mode (zero counts included).
    pub class_histogram: BTreeMap<String, usize>,
    pub intervals: IntervalStats,
    pub widths_conform: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every sample invariant; never fails, only reports.
pub fn validate_dataset(samples: &[VideoSample], cfg: &GeneratorConfig) -> ValidationReport {
    let names = cfg.mode.class_names();
    let normal = cfg.mode.normal_class();
    let widths = cfg.channel_widths.as_array();
    let mut violations = Vec::new();
    let mut hist: BTreeMap<String, usize> = names.iter().map(|n| (n.to_string(), 0)).collect();
    let mut widths_conform = true;
    let (mut n_int, mut int_len, mut max_len, mut n_seg, mut n_sent) = (0usize, 0usize, 0usize, 0usize, 0usize);

    for v in samples {
        let id = &v.video_id;
        for (pos, s) in v.segments.iter().enumerate() {
            n_seg += 1;
            if s.index != pos {
                violations.push(format!("{id}: segment at position {pos} has index {}", s.index));
            }
            match names.get(s.class) {
                Some(n) => *hist.get_mut(*n).expect("all names present") += 1,
                None => violations.push(format!("{id}/{pos}: class {} out of range", s.class)),
            }
            if s.class != normal {
                n_sent += 1;
                if s.cause_channel.is_none() {
                    violations.push(format!("{id}/{pos}: sentiment segment without cause_channel"));
                }
                if s.cause_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    violations.push(format!("{id}/{pos}: sentiment segment without cause_text"));
                }
            } else if s.cause_channel.is_some() || s.cause_text.is_some() {
                violations.push(format!("{id}/{pos}: background segment carries a cause"));
            }
            for ch in Channel::ALL {
                let m = s.features.channel(ch);
                if m.shape() != (cfg.frames_per_segment, widths[ch.index()]) {
                    widths_conform = false;
                    violations.push(format!("{id}/{pos}: channel {} has shape {}", ch.name(), m.shape_str()));
                }
                if !m.is_finite() {
                    violations.push(format!("{id}/{pos}: channel {} has non-finite values", ch.name()));
                }
            }
        }

        let mut covered = vec![false; v.segments.len()];
        let mut prev_end = 0usize;
        for (k, iv) in v.intervals.iter().enumerate() {
            n_int += 1;
            let len = iv.end_segment.saturating_sub(iv.start_segment);
            int_len += len;
            max_len = max_len.max(len);
            if iv.start_segment >= iv.end_segment || iv.end_segment > v.segments.len() {
                violations.push(format!("{id}: interval {k} [{}, {}) is empty or out of range", iv.start_segment, iv.end_segment));
                continue;
            }
            if k > 0 && iv.start_segment < prev_end {
                violations.push(format!("{id}: interval {k} overlaps or is out of order"));
            }
            prev_end = prev_end.max(iv.end_segment);
            for (s, c) in covered.iter_mut().enumerate().take(iv.end_segment).skip(iv.start_segment) {
                if *c {
                    violations.push(format!("{id}: segment {s} covered twice"));
                }
                *c = true;
                if v.segments[s].class != iv.class {
                    violations.push(format!("{id}: interval {k} class disagrees with segment {s}"));
                }
            }
            if iv.cause_text.trim().is_empty() {
                violations.push(format!("{id}: interval {k} has empty cause_text"));
            }
        }
        for (s, seg) in v.segments.iter().enumerate() {
            if (seg.class != normal) != covered[s] {
                violations.push(format!("{id}: intervals do not tile sentiment segments at {s}"));
            }
        }
    }
    ValidationReport {
        videos: samples.len(),
        segments: n_seg,
        violations,
        class_histogram: hist,
        intervals: IntervalStats {
            count: n_int,
            mean_segments: if n_int > 0 { int_len as f64 / n_int as f64 } else { 0.0 },
            max_segments: max_len,
            sentiment_segment_fraction: if n_seg > 0 { n_sent as f64 / n_seg as f64 } else { 0.0 },
        },
        widths_conform,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pearson correlation, over all (segment, class) pairs, between the cosine
/// alignment of the frame-mean facial features with the class's facial
/// prototype and the indicator that the class is the segment's label.
pub fn facial_label_alignment(samples: &[VideoSample], protos: &Prototypes) -> f64 {
    let facial = &protos.channels[Channel::Facial.index()];
    let k = facial.rows();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for v in samples {
        for s in &v.segments {
            let mean = s.features.x_f.mean_rows();
            for c in 0..k {
                xs.push(cosine(mean.row(0), facial.row(c)));
                ys.push(if c == s.class { 1.0 } else { 0.0 });
            }
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}
