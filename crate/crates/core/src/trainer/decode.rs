use serde::{Deserialize, Serialize};

use super::{argmax, ModelState};
use crate::error::{IcmError, Result};
use crate::numerics::softmax;
use crate::synthgen::templates::render_cause;
use crate::synthgen::{Channel, Mode, VideoSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub class_claim: usize,
    pub cause_channel: Channel,
    pub cause_text: String,
    pub confidence: f64,
}

/// A located sentiment interval with its attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub start_s: f64,
    pub end_s: f64,
    pub class: usize,
    pub attribution: Attribution,
}

/// Merges runs of equal non-Normal per-segment argmax classes into triples.
pub fn decode_triples(mode: Mode, segment_seconds: f64, class_logits: &[Vec<f64>], cause_logits: &[Vec<f64>]) -> Result<Vec<PredictionTriple>> {
    if class_logits.len() != cause_logits.len() {
        return Err(IcmError::dim("decode_triples", class_logits.len(), cause_logits.len()));
    }
    if !(segment_seconds > 0.0) {
        return Err(IcmError::Config(format!("segment_seconds must be > 0, got {segment_seconds}")));
    }
    let normal = mode.normal_class();
    let labels: Vec<usize> = class_logits.iter().map(|l| argmax(l)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let class = labels[i];
        let mut j = i + 1;
        while j < labels.len() && labels[j] == class {
            j += 1;
        }
        if class != normal {
            let n = (j - i) as f64;
            let mut confidence = 0.0;
            let mut cause = vec![0.0; cause_logits[i].len()];
            for s in i..j {
                confidence += softmax(&class_logits[s])?[class] / n;
                for (c, v) in cause.iter_mut().zip(&cause_logits[s]) {
                    *c += v / n;
                }
            }
            let channel = Channel::from_index(argmax(&cause))
                .ok_or_else(|| IcmError::Data(format!("cause logits have {} entries, expected 4", cause.len())))?;
            out.push(PredictionTriple {
                start_s: i as f64 * segment_seconds,
                end_s: j as f64 * segment_seconds,
                class,
                attribution: Attribution {
                    class_claim: class,
                    cause_channel: channel,
                    cause_text: render_cause(mode, class, channel, 0),
                    confidence: confidence.clamp(0.0, 1.0),
                },
            });
        }
        i = j;
    }
    Ok(out)
}

pub fn predict_triples(model: &ModelState, video: &VideoSample, segment_seconds: f64) -> Result<Vec<PredictionTriple>> {
    let mem = model.memory()?;
    let mut class_logits = Vec::with_capacity(video.segments.len());
    let mut cause_logits = Vec::with_capacity(video.segments.len());
    for seg in &video.segments {
        let pass = model.network.forward_segment(&model.tape, &seg.features, mem.as_ref(), model.switches)?;
        class_logits.push(pass.class_logits);
        cause_logits.push(pass.cause_logits);
    }
    decode_triples(model.network.shape.mode, segment_seconds, &class_logits, &cause_logits)
}
