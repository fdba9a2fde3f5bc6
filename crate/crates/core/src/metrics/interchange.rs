//! Newline-delimited JSON interval files. The first line may be a header
//! object carrying a `format` key; every other line is one interval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::fsutil;
use crate::synthgen::{Mode, VideoSample};
use crate::trainer::PredictionTriple;

pub const PREDICTIONS_FORMAT: &str = "icm-predictions";
pub const GROUND_TRUTH_FORMAT: &str = "icm-ground-truth";
pub const INTERCHANGE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub video_id: String,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangeHeader {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos: Option<Vec<VideoInfo>>,
    /// Externally judged attribution rationality, merged into reports as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atr_r: Option<f64>,
}

fn default_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub class: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub cause_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_claim: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause_channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl IntervalRecord {
    pub fn claim(&self) -> &str {
        self.class_claim.as_deref().unwrap_or(&self.class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub header: Option<InterchangeHeader>,
    pub records: Vec<IntervalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFile {
    pub header: InterchangeHeader,
    pub records: Vec<IntervalRecord>,
}

impl GroundTruthFile {
    pub fn classes(&self) -> &[String] {
        self.header.classes.as_deref().unwrap_or_default()
    }

    pub fn normal_class(&self) -> &str {
        self.header.normal_class.as_deref().unwrap_or_default()
    }

    pub fn segment_seconds(&self) -> f64 {
        self.header.segment_seconds.unwrap_or(1.0)
    }

    pub fn videos(&self) -> &[VideoInfo] {
        self.header.videos.as_deref().unwrap_or_default()
    }

    pub fn from_videos(mode: Mode, segment_seconds: f64, videos: &[VideoSample]) -> Self {
        let mut records = Vec::new();
        for v in videos {
            for iv in &v.intervals {
                records.push(IntervalRecord {
                    video_id: v.video_id.clone(),
                    start_s: iv.start_s(segment_seconds),
                    end_s: iv.end_s(segment_seconds),
                    class: mode.class_names()[iv.class].to_string(),
                    confidence: 1.0,
                    cause_text: iv.cause_text.clone(),
                    class_claim: None,
                    cause_channel: Some(iv.cause_channel.name().to_string()),
                    embedding: None,
                });
            }
        }
        GroundTruthFile {
            header: InterchangeHeader {
                format: GROUND_TRUTH_FORMAT.into(),
                version: INTERCHANGE_VERSION,
                classes: Some(mode.class_names().iter().map(|c| c.to_string()).collect()),
                normal_class: Some(mode.class_names()[mode.normal_class()].to_string()),
                segment_seconds: Some(segment_seconds),
                videos: Some(
                    videos
                        .iter()
                        .map(|v| VideoInfo {
                            video_id: v.video_id.clone(),
                            segments: v.segments.len(),
                        })
                        .collect(),
                ),
                atr_r: None,
            },
            records,
        }
    }
}

impl PredictionFile {
    pub fn from_triples<'a>(mode: Mode, per_video: impl IntoIterator<Item = (&'a str, &'a [PredictionTriple])>) -> Self {
        let names = mode.class_names();
        let mut records = Vec::new();
        for (video_id, triples) in per_video {
            for t in triples {
                records.push(IntervalRecord {
                    video_id: video_id.to_string(),
                    start_s: t.start_s,
                    end_s: t.end_s,
                    class: names[t.class].to_string(),
                    confidence: t.attribution.confidence,
                    cause_text: t.attribution.cause_text.clone(),
                    class_claim: Some(names[t.attribution.class_claim].to_string()),
                    cause_channel: Some(t.attribution.cause_channel.name().to_string()),
                    embedding: None,
                });
            }
        }
        PredictionFile {
            header: Some(InterchangeHeader {
                format: PREDICTIONS_FORMAT.into(),
                version: INTERCHANGE_VERSION,
                classes: Some(names.iter().map(|c| c.to_string()).collect()),
                normal_class: Some(names[mode.normal_class()].to_string()),
                segment_seconds: None,
                videos: None,
                atr_r: None,
            }),
            records,
        }
    }
}

fn check_record(r: &IntervalRecord, line: usize) -> Result<()> {
    if !(r.start_s.is_finite() && r.end_s.is_finite() && r.start_s >= 0.0 && r.start_s < r.end_s) {
        return Err(IcmError::Data(format!(
            "line {line}: invalid interval [{}, {}] for video {:?}",
            r.start_s, r.end_s, r.video_id
        )));
    }
    if !(r.confidence.is_finite() && (0.0..=1.0).contains(&r.confidence)) {
        return Err(IcmError::Data(format!("line {line}: confidence {} outside [0, 1]", r.confidence)));
    }
    Ok(())
}

fn parse_lines(text: &str, expected: &str) -> Result<(Option<InterchangeHeader>, Vec<IntervalRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| IcmError::Data(format!("line {}: {e}", i + 1)))?;
        if value.get("format").is_some() {
            if header.is_some() || !records.is_empty() {
                return Err(IcmError::Data(format!("line {}: header must be the first record", i + 1)));
            }
            let h: InterchangeHeader =
                serde_json::from_value(value).map_err(|e| IcmError::Data(format!("line {}: header: {e}", i + 1)))?;
            if h.format != expected {
                return Err(IcmError::Incompatible(format!("expected format {expected:?}, found {:?}", h.format)));
            }
            if h.version != INTERCHANGE_VERSION {
                return Err(IcmError::Incompatible(format!(
                    "{expected} version {} is not supported (expected {INTERCHANGE_VERSION})",
                    h.version
                )));
            }
            header = Some(h);
            continue;
        }
        let r: IntervalRecord = serde_json::from_value(value).map_err(|e| IcmError::Data(format!("line {}: {e}", i + 1)))?;
        check_record(&r, i + 1)?;
        records.push(r);
    }
    Ok((header, records))
}

pub fn parse_predictions(text: &str) -> Result<PredictionFile> {
    let (header, records) = parse_lines(text, PREDICTIONS_FORMAT)?;
    Ok(PredictionFile { header, records })
}

/// Ground truth must carry a header naming the class set and listing every
/// video with its segment count.
pub fn parse_ground_truth(text: &str) -> Result<GroundTruthFile> {
    let (header, records) = parse_lines(text, GROUND_TRUTH_FORMAT)?;
    let header = header.ok_or_else(|| IcmError::Data("ground truth needs a header line".into()))?;
    let classes = header.classes.as_ref().filter(|c| !c.is_empty());
    let Some(classes) = classes else {
        return Err(IcmError::Data("ground-truth header lists no classes".into()));
    };
    match &header.normal_class {
        Some(n) if classes.contains(n) => {}
        other => return Err(IcmError::Data(format!("normal class {other:?} is not among the header classes"))),
    }
    if header.videos.is_none() {
        return Err(IcmError::Data("ground-truth header lists no videos".into()));
    }
    if let Some(ss) = header.segment_seconds {
        if !(ss > 0.0 && ss.is_finite()) {
            return Err(IcmError::Data(format!("segment_seconds must be positive, got {ss}")));
        }
    }
    Ok(GroundTruthFile { header, records })
}

fn render(header: Option<&InterchangeHeader>, records: &[IntervalRecord]) -> Result<String> {
    let mut out = String::new();
    let enc = |e: serde_json::Error| IcmError::Data(format!("encoding interval file: {e}"));
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(h).map_err(enc)?);
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(enc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, file: &PredictionFile) -> Result<()> {
    fsutil::write_atomic(path, render(file.header.as_ref(), &file.records)?.as_bytes())
}

pub fn write_ground_truth(path: &Path, file: &GroundTruthFile) -> Result<()> {
    fsutil::write_atomic(path, render(Some(&file.header), &file.records)?.as_bytes())
}
