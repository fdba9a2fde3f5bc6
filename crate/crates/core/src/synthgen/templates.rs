//! Cause-sentence templates shared by the generator (ground truth) and the
//! decoder (predicted attributions), so both live in one text space.

use crate::synthgen::{Channel, Mode};

pub const VARIANTS: usize = 3;

fn channel_phrase(channel: Channel) -> &'static str {
    match channel {
        Channel::Facial => "facial expression",
        Channel::Action => "human action",
        Channel::Object => "object relation",
        Channel::Background => "visual background",
    }
}

fn class_phrase(mode: Mode, class: usize) -> &'static str {
    const EXPLICIT: [&str; 3] = ["a calm neutral mood", "a joyful positive mood", "a distressed negative mood"];
    const IMPLICIT: [&str; 12] = [
        "an ordinary normal scene",
        "people fighting each other",
        "an animal attacking a person",
        "a person struggling in water",
        "someone damaging public property",
        "vehicles crashing on the road",
        "a person being robbed by force",
        "someone secretly stealing belongings",
        "a vehicle breaking traffic rules",
        "a building on fire",
        "a pedestrian being struck",
        "someone burning waste illegally",
    ];
    match mode {
        Mode::Explicit => EXPLICIT[class],
        Mode::Implicit => IMPLICIT[class],
    }
}

/// Renders paraphrase `variant` (taken modulo [`VARIANTS`]) of the cause
/// sentence for `(class, channel)`. Tokens are lowercase and
/// whitespace-separated.
pub fn render_cause(mode: Mode, class: usize, channel: Channel, variant: usize) -> String {
    let c = channel_phrase(channel);
    let s = class_phrase(mode, class);
    match variant % VARIANTS {
        0 => format!("the {c} reveals {s}"),
        1 => format!("{s} is evident from the {c}"),
        _ => format!("cues in the {c} point to {s}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_are_distinct_and_lowercase() {
        for mode in [Mode::Explicit, Mode::Implicit] {
            for class in 0..mode.num_classes() {
                for ch in Channel::ALL {
                    let texts: Vec<_> = (0..VARIANTS).map(|v| render_cause(mode, class, ch, v)).collect();
                    assert_ne!(texts[0], texts[1]);
                    assert_ne!(texts[1], texts[2]);
                    assert!(texts.iter().all(|t| t.to_lowercase() == *t));
                }
            }
        }
    }
}
