//! Synthetic omni-scene video generator with controllable explicit
//! (facial-channel contradiction) and implicit (shared latent) confounding.
//!
//! Generative model, per class `k` and channel `j` a prototype `μ[j][k]`:
//!
//! * implicit channels (action, object, background) show `μ[j][class]`;
//! * the facial channel shows `μ[f][class]` with probability `1 − ρ`, else the
//!   prototype of a uniformly drawn different class;
//! * the cause channel of a sentiment-bearing segment is scaled by
//!   `1 + cause_boost`;
//! * every frame adds `noise_sigma · N(0, I)` and a per-video confounder
//!   offset, `κ·c` on the facial channel and `κ/4·c` elsewhere.
//!
//! The Gaussian-prototype model is an artifact construct: it makes the
//! confounding knobs explicit, not a model of real extractor statistics.

mod io;
pub mod templates;
mod validate;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::numerics::Tensor2;

pub use io::{generate_dataset, load_dataset, write_dataset, Dataset, Manifest, SplitInfo, DATASET_FORMAT, DATASET_VERSION};
pub use validate::{facial_label_alignment, validate_dataset, IntervalStats, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Explicit,
    Implicit,
}

const EXPLICIT_CLASSES: [&str; 3] = ["neutral", "positive", "negative"];
const IMPLICIT_CLASSES: [&str; 12] = [
    "Normal",
    "Fighting",
    "Animals Hurting People",
    "Water Incidents",
    "Vandalism",
    "Traffic Accidents",
    "Robbery",
    "Theft",
    "Traffic Violations",
    "Fire",
    "Pedestrian Incidents",
    "Forbidden to Burn",
];

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Explicit => "explicit",
            Mode::Implicit => "implicit",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Mode::Explicit => &EXPLICIT_CLASSES,
            Mode::Implicit => &IMPLICIT_CLASSES,
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Index of the background class (`neutral` / `Normal`); always 0.
    pub fn normal_class(self) -> usize {
        0
    }

    pub fn class_index(self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|c| *c == name)
    }
}

impl std::str::FromStr for Mode {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Mode::Explicit),
            "implicit" => Ok(Mode::Implicit),
            other => Err(IcmError::Config(format!("unknown mode {other:?} (expected explicit|implicit)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Facial,
    Action,
    Object,
    Background,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Facial, Channel::Action, Channel::Object, Channel::Background];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Channel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Facial => "facial",
            Channel::Action => "action",
            Channel::Object => "object",
            Channel::Background => "background",
        }
    }

    pub fn from_name(s: &str) -> Option<Channel> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelWidths {
    pub facial: usize,
    pub action: usize,
    pub object: usize,
    pub background: usize,
}

impl Default for ChannelWidths {
    fn default() -> Self {
        Self {
            facial: 32,
            action: 48,
            object: 24,
            background: 64,
        }
    }
}

impl ChannelWidths {
    pub fn as_array(&self) -> [usize; 4] {
        [self.facial, self.action, self.object, self.background]
    }

    pub fn get(&self, c: Channel) -> usize {
        self.as_array()[c.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub mode: Mode,
    pub num_videos: usize,
    /// Fraction of videos (rounded) placed in the test split.
    pub test_fraction: f64,
    pub segments_per_video: usize,
    pub frames_per_segment: usize,
    pub channel_widths: ChannelWidths,
    /// κ: scale of the per-video confounder offset.
    pub confounder_strength: f64,
    /// ρ: probability that the facial channel shows a different class.
    pub contradiction_rate: f64,
    pub noise_sigma: f64,
    /// Relative amplification of the cause channel's prototype.
    pub cause_boost: f64,
    /// Upper bound on sentiment events per video.
    pub max_events: usize,
    pub segment_seconds: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Implicit,
            num_videos: 160,
            test_fraction: 0.2,
            segments_per_video: 8,
            frames_per_segment: 4,
            channel_widths: ChannelWidths::default(),
            confounder_strength: 1.0,
            contradiction_rate: 0.5,
            noise_sigma: 1.0,
            cause_boost: 0.5,
            max_events: 2,
            segment_seconds: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IcmError::Config(m));
        if self.num_videos == 0 {
            return bad("num_videos must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} outside [0,1]", self.test_fraction));
        }
        if self.segments_per_video < 2 {
            return bad(format!("segments_per_video must be >= 2, got {}", self.segments_per_video));
        }
        if self.frames_per_segment == 0 {
            return bad("frames_per_segment must be >= 1".into());
        }
        if let Some(w) = self.channel_widths.as_array().iter().find(|w| **w < 2) {
            return bad(format!("channel widths must be >= 2, got {w}"));
        }
        if !(self.confounder_strength >= 0.0) || !self.confounder_strength.is_finite() {
            return bad(format!("confounder_strength must be >= 0, got {}", self.confounder_strength));
        }
        if !(0.0..=1.0).contains(&self.contradiction_rate) {
            return bad(format!("contradiction_rate {} outside [0,1]", self.contradiction_rate));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !(self.cause_boost >= 0.0) || !(self.segment_seconds > 0.0) {
            return bad("cause_boost must be >= 0 and segment_seconds > 0".into());
        }
        if self.max_events == 0 {
            return bad("max_events must be >= 1".into());
        }
        Ok(())
    }

    pub fn num_test(&self) -> usize {
        ((self.num_videos as f64) * self.test_fraction).round() as usize
    }

    pub fn num_train(&self) -> usize {
        self.num_videos - self.num_test()
    }
}

/// Frame-level features of one segment, one matrix per scene channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatureBundle {
    pub x_f: Tensor2,
    pub x_a: Tensor2,
    pub x_o: Tensor2,
    pub x_b: Tensor2,
}

impl SceneFeatureBundle {
    pub fn channels(&self) -> [&Tensor2; 4] {
        [&self.x_f, &self.x_a, &self.x_o, &self.x_b]
    }

    pub fn channel(&self, c: Channel) -> &Tensor2 {
        self.channels()[c.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub features: SceneFeatureBundle,
    pub class: usize,
    /// Class whose facial prototype the segment shows (differs from `class`
    /// on contradicted segments).
    pub facial_class: usize,
    pub cause_channel: Option<Channel>,
    pub cause_text: Option<String>,
}

/// A contiguous run of one non-background class, `[start_segment, end_segment)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInterval {
    pub start_segment: usize,
    pub end_segment: usize,
    pub class: usize,
    pub cause_channel: Channel,
    pub cause_text: String,
}

impl GtInterval {
    pub fn start_s(&self, segment_seconds: f64) -> f64 {
        self.start_segment as f64 * segment_seconds
    }

    pub fn end_s(&self, segment_seconds: f64) -> f64 {
        self.end_segment as f64 * segment_seconds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub segments: Vec<Segment>,
    pub intervals: Vec<GtInterval>,
}

impl VideoSample {
    /// Builds a sample and derives its intervals from the segment labels.
    pub fn new(video_id: String, segments: Vec<Segment>, normal_class: usize) -> Result<Self> {
        let intervals = derive_intervals(&segments, normal_class)?;
        Ok(Self {
            video_id,
            segments,
            intervals,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.class).collect()
    }
}

/// Groups consecutive equal non-background labels into intervals. The cause
/// of a run is taken from its first segment.
pub fn derive_intervals(segments: &[Segment], normal_class: usize) -> Result<Vec<GtInterval>> {
    let mut out: Vec<GtInterval> = Vec::new();
    let mut i = 0;
    while i < segments.len() {
        let s = &segments[i];
        if s.class == normal_class {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < segments.len() && segments[j].class == s.class {
            j += 1;
        }
        let (Some(channel), Some(text)) = (s.cause_channel, s.cause_text.clone()) else {
            return Err(IcmError::Data(format!(
                "segment {} has sentiment class {} but no cause annotation",
                s.index, s.class
            )));
        };
        out.push(GtInterval {
            start_segment: i,
            end_segment: j,
            class: s.class,
            cause_channel: channel,
            cause_text: text,
        });
        i = j;
    }
    Ok(out)
}

/// Class prototypes per channel: `prototypes[channel]` is `classes × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub channels: Vec<Tensor2>,
}

impl Prototypes {
    pub fn draw(cfg: &GeneratorConfig) -> Prototypes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4f54_4f54_5950);
        let k = cfg.mode.num_classes();
        let channels = cfg
            .channel_widths
            .as_array()
            .iter()
            .map(|&w| {
                let data = (0..k * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor2::from_vec(k, w, data).expect("shape")
            })
            .collect();
        Prototypes { channels }
    }

    pub fn get(&self, channel: Channel, class: usize) -> &[f64] {
        self.channels[channel.index()].row(class)
    }

    /// Noise-free signal the channel carries for a segment: the shown
    /// prototype, boosted when the channel is the cause.
    pub fn scene_target(&self, seg: &Segment, channel: Channel, cause_boost: f64) -> Vec<f64> {
        let class = if channel == Channel::Facial { seg.facial_class } else { seg.class };
        let gain = if seg.cause_channel == Some(channel) { 1.0 + cause_boost } else { 1.0 };
        self.get(channel, class).iter().map(|v| v * gain).collect()
    }
}

fn video_rng(seed: u64, video_index: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((video_index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        ^ 0x94d0_49bb_1331_11eb;
    ChaCha8Rng::seed_from_u64(mixed)
}

struct Event {
    start: usize,
    len: usize,
    class: usize,
    channel: Channel,
    variant: usize,
}

fn draw_events(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let t = cfg.segments_per_video;
    let k = cfg.mode.num_classes();
    // ~10% of videos contain no sentiment event.
    let n_events = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=cfg.max_events) };
    let max_len = (t / 2).max(1);
    let mut pos = rng.random_range(0..=2.min(t - 1));
    let mut events = Vec::new();
    for _ in 0..n_events {
        let len = rng.random_range(1..=max_len);
        if pos + len > t {
            break;
        }
        let class = rng.random_range(1..k);
        let channel = *Channel::ALL.choose(rng).expect("non-empty");
        let variant = rng.random_range(0..templates::VARIANTS);
        events.push(Event {
            start: pos,
            len,
            class,
            channel,
            variant,
        });
        pos += len + 1 + rng.random_range(0..=2);
    }
    events
}

/// Generates one video; its randomness depends only on `(seed, index)`.
pub fn generate_video(cfg: &GeneratorConfig, protos: &Prototypes, index: usize) -> VideoSample {
    let mut rng = video_rng(cfg.seed, index);
    let widths = cfg.channel_widths.as_array();
    let max_w = *widths.iter().max().expect("four channels");
    let confounder: Vec<f64> = (0..max_w).map(|_| rng.sample(StandardNormal)).collect();
    let events = draw_events(cfg, &mut rng);
    let k = cfg.mode.num_classes();
    let normal = cfg.mode.normal_class();

    let mut segments = Vec::with_capacity(cfg.segments_per_video);
    for s in 0..cfg.segments_per_video {
        let ev = events.iter().find(|e| (e.start..e.start + e.len).contains(&s));
        let class = ev.map_or(normal, |e| e.class);
        let facial_class = if rng.random_bool(cfg.contradiction_rate) {
            let other = rng.random_range(0..k - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        let cause_channel = ev.map(|e| e.channel);
        let cause_text = ev.map(|e| templates::render_cause(cfg.mode, e.class, e.channel, e.variant));
        let mut seg = Segment {
            index: s,
            features: SceneFeatureBundle {
                x_f: Tensor2::zeros(0, 0),
                x_a: Tensor2::zeros(0, 0),
                x_o: Tensor2::zeros(0, 0),
                x_b: Tensor2::zeros(0, 0),
            },
            class,
            facial_class,
            cause_channel,
            cause_text,
        };
        let mut mats = Vec::with_capacity(4);
        for ch in Channel::ALL {
            let w = widths[ch.index()];
            let signal = protos.scene_target(&seg, ch, cfg.cause_boost);
            let conf_scale = if ch == Channel::Facial {
                cfg.confounder_strength
            } else {
                cfg.confounder_strength / 4.0
            };
            let mut m = Tensor2::zeros(cfg.frames_per_segment, w);
            for f in 0..cfg.frames_per_segment {
                for (j, v) in m.row_mut(f).iter_mut().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *v = signal[j] + cfg.noise_sigma * noise + conf_scale * confounder[j];
                }
            }
            mats.push(m);
        }
        let mut it = mats.into_iter();
        seg.features = SceneFeatureBundle {
            x_f: it.next().expect("4"),
            x_a: it.next().expect("4"),
            x_o: it.next().expect("4"),
            x_b: it.next().expect("4"),
        };
        segments.push(seg);
    }
    VideoSample::new(format!("v{index:05}"), segments, normal).expect("generated causes are complete")
}

/// In-memory generation of both splits.
pub fn generate_samples(cfg: &GeneratorConfig) -> Result<(Prototypes, Vec<VideoSample>, Vec<VideoSample>)> {
    cfg.validate()?;
    let protos = Prototypes::draw(cfg);
    let n_train = cfg.num_train();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(cfg.num_test());
    for i in 0..cfg.num_videos {
        let v = generate_video(cfg, &protos, i);
        if i < n_train {
            train.push(v);
        } else {
            test.push(v);
        }
    }
    Ok((protos, train, test))
}
