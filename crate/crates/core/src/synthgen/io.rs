//! Dataset files: `manifest.json` plus one newline-delimited record per
//! segment in `train.jsonl` / `test.jsonl`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::fsutil::{read, sha256_hex, write_atomic};
use crate::numerics::Tensor2;
use crate::sig17;
use crate::synthgen::{
    generate_samples, Channel, GeneratorConfig, Prototypes, SceneFeatureBundle, Segment, VideoSample,
};

pub const DATASET_FORMAT: &str = "icm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub videos: usize,
    pub segments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: GeneratorConfig,
    pub class_names: Vec<String>,
    pub normal_class: usize,
    pub channel_names: Vec<String>,
    pub segment_seconds: f64,
    pub splits: Vec<SplitInfo>,
    /// Per-channel `classes × width` prototype matrices (scene-tuning targets).
    #[serde(with = "sig17::matrices")]
    pub prototypes: Vec<Tensor2>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    video_id: String,
    segment_index: usize,
    class: usize,
    facial_class: usize,
    cause_channel: Option<Channel>,
    cause_text: Option<String>,
    #[serde(with = "sig17::matrix")]
    x_f: Tensor2,
    #[serde(with = "sig17::matrix")]
    x_a: Tensor2,
    #[serde(with = "sig17::matrix")]
    x_o: Tensor2,
    #[serde(with = "sig17::matrix")]
    x_b: Tensor2,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub prototypes: Prototypes,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
    /// SHA-256 of the manifest bytes (which pin the split hashes).
    pub hash: String,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[VideoSample]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(IcmError::Config(format!("unknown split {other:?} (expected train|test)"))),
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.manifest.config
    }
}

fn split_text(videos: &[VideoSample]) -> String {
    let mut out = String::new();
    for v in videos {
        for s in &v.segments {
            let rec = Record {
                video_id: v.video_id.clone(),
                segment_index: s.index,
                class: s.class,
                facial_class: s.facial_class,
                cause_channel: s.cause_channel,
                cause_text: s.cause_text.clone(),
                x_f: s.features.x_f.clone(),
                x_a: s.features.x_a.clone(),
                x_o: s.features.x_o.clone(),
                x_b: s.features.x_b.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
            out.push('\n');
        }
    }
    out
}

/// Writes both splits and the manifest under `dir`; returns the manifest.
pub fn write_dataset(
    dir: &Path,
    cfg: &GeneratorConfig,
    protos: &Prototypes,
    train: &[VideoSample],
    test: &[VideoSample],
) -> Result<Manifest> {
    let mut splits = Vec::new();
    for (name, videos) in [("train", train), ("test", test)] {
        let text = split_text(videos);
        let file = format!("{name}.jsonl");
        write_atomic(&dir.join(&file), text.as_bytes())?;
        splits.push(SplitInfo {
            name: name.to_string(),
            file,
            videos: videos.len(),
            segments: videos.iter().map(|v| v.segments.len()).sum(),
            sha256: Some(sha256_hex(text.as_bytes())),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        config: cfg.clone(),
        class_names: cfg.mode.class_names().iter().map(|s| s.to_string()).collect(),
        normal_class: cfg.mode.normal_class(),
        channel_names: Channel::ALL.iter().map(|c| c.name().to_string()).collect(),
        segment_seconds: cfg.segment_seconds,
        splits,
        prototypes: protos.channels.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn generate_dataset(cfg: &GeneratorConfig, dir: &Path) -> Result<Manifest> {
    let (protos, train, test) = generate_samples(cfg)?;
    write_dataset(dir, cfg, &protos, &train, &test)
}

fn check_matrix(m: &Tensor2, rows: usize, cols: usize, ctx: &str, field: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(IcmError::Data(format!(
            "{ctx}: field {field} has shape {}, expected {rows}x{cols}",
            m.shape_str()
        )));
    }
    if !m.is_finite() {
        return Err(IcmError::Data(format!("{ctx}: field {field} contains non-finite values")));
    }
    Ok(())
}

fn parse_split(text: &str, manifest: &Manifest, split: &SplitInfo) -> Result<Vec<VideoSample>> {
    let cfg = &manifest.config;
    let k = manifest.class_names.len();
    let widths = cfg.channel_widths.as_array();
    let mut videos: Vec<VideoSample> = Vec::new();
    let mut current: Option<(String, Vec<Segment>)> = None;
    let flush = |cur: Option<(String, Vec<Segment>)>, videos: &mut Vec<VideoSample>| -> Result<()> {
        if let Some((id, segs)) = cur {
            if segs.len() != cfg.segments_per_video {
                return Err(IcmError::Data(format!(
                    "split {}: video {id} has {} segments, expected {}",
                    split.name,
                    segs.len(),
                    cfg.segments_per_video
                )));
            }
            videos.push(VideoSample::new(id, segs, manifest.normal_class)?);
        }
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = format!("split {} line {}", split.name, lineno + 1);
        let rec: Record = serde_json::from_str(line).map_err(|e| IcmError::Data(format!("{ctx}: {e}")))?;
        let ctx = format!("{ctx} (video {}, segment {})", rec.video_id, rec.segment_index);
        if rec.class >= k {
            return Err(IcmError::Data(format!("{ctx}: field class = {} out of range", rec.class)));
        }
        if rec.facial_class >= k {
            return Err(IcmError::Data(format!("{ctx}: field facial_class = {} out of range", rec.facial_class)));
        }
        let sentiment = rec.class != manifest.normal_class;
        if sentiment != rec.cause_channel.is_some() || sentiment != rec.cause_text.is_some() {
            return Err(IcmError::Data(format!(
                "{ctx}: fields cause_channel/cause_text must be present exactly on sentiment segments"
            )));
        }
        if rec.cause_text.as_deref().is_some_and(|t| t.trim().is_empty()) {
            return Err(IcmError::Data(format!("{ctx}: field cause_text is empty")));
        }
        for (field, m, w) in [
            ("x_f", &rec.x_f, widths[0]),
            ("x_a", &rec.x_a, widths[1]),
            ("x_o", &rec.x_o, widths[2]),
            ("x_b", &rec.x_b, widths[3]),
        ] {
            check_matrix(m, cfg.frames_per_segment, w, &ctx, field)?;
        }
        if current.as_ref().is_none_or(|(id, _)| *id != rec.video_id) {
            flush(current.take(), &mut videos)?;
            current = Some((rec.video_id.clone(), Vec::new()));
        }
        let (_, segs) = current.as_mut().expect("set above");
        if rec.segment_index != segs.len() {
            return Err(IcmError::Data(format!(
                "{ctx}: field segment_index out of sequence (expected {})",
                segs.len()
            )));
        }
        segs.push(Segment {
            index: rec.segment_index,
            features: SceneFeatureBundle {
                x_f: rec.x_f,
                x_a: rec.x_a,
                x_o: rec.x_o,
                x_b: rec.x_b,
            },
            class: rec.class,
            facial_class: rec.facial_class,
            cause_channel: rec.cause_channel,
            cause_text: rec.cause_text,
        });
    }
    flush(current.take(), &mut videos)?;
    let segments: usize = videos.iter().map(|v| v.segments.len()).sum();
    if videos.len() != split.videos || segments != split.segments {
        return Err(IcmError::Data(format!(
            "split {}: found {} videos / {} segments, manifest lists {} / {}",
            split.name,
            videos.len(),
            segments,
            split.videos,
            split.segments
        )));
    }
    Ok(videos)
}

/// Loads and validates a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = read(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| IcmError::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(IcmError::Incompatible(format!("manifest format {:?} is not {DATASET_FORMAT}", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(IcmError::Incompatible(format!(
            "dataset version {} unsupported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let mode = manifest.config.mode;
    if manifest.class_names.len() != mode.num_classes() || manifest.normal_class != mode.normal_class() {
        return Err(IcmError::Data("manifest: field class_names does not match the mode's class set".into()));
    }
    let widths = manifest.config.channel_widths.as_array();
    if manifest.prototypes.len() != 4
        || manifest
            .prototypes
            .iter()
            .zip(widths)
            .any(|(p, w)| p.shape() != (mode.num_classes(), w))
    {
        return Err(IcmError::Data("manifest: field prototypes has wrong shape".into()));
    }
    let mut train = None;
    let mut test = None;
    for split in &manifest.splits {
        let bytes = read(&dir.join(&split.file))?;
        if let Some(expected) = &split.sha256 {
            let got = sha256_hex(&bytes);
            if &got != expected {
                return Err(IcmError::Data(format!(
                    "split {}: content hash {got} does not match manifest {expected} (truncated or modified file)",
                    split.name
                )));
            }
        }
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| IcmError::Data(format!("split {}: not UTF-8: {e}", split.name)))?;
        let videos = parse_split(text, &manifest, split)?;
        match split.name.as_str() {
            "train" => train = Some(videos),
            "test" => test = Some(videos),
            other => return Err(IcmError::Data(format!("manifest: unknown split {other:?}"))),
        }
    }
    let prototypes = Prototypes {
        channels: manifest.prototypes.clone(),
    };
    Ok(Dataset {
        root: dir.to_path_buf(),
        hash: sha256_hex(&manifest_bytes),
        prototypes,
        train: train.unwrap_or_default(),
        test: test.unwrap_or_default(),
        manifest,
    })
}
