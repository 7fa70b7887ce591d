//! SVG piano-roll rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use melody_core::pianoroll::{PianoRoll, PITCHES};
use melody_core::NoteId;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Pixel size of one roll cell.
    pub scale: f64,
    pub melody_color: String,
    pub accompaniment_color: String,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            scale: 4.0,
            melody_color: "#d62728".into(),
            accompaniment_color: "#444444".into(),
        }
    }
}

/// What to paint on top of the plain roll.
#[derive(Debug, Clone, Default)]
pub struct Overlay {
    pub melody: BTreeSet<NoteId>,
    /// When present every note is drawn in the melody color with opacity
    /// equal to its probability.
    pub probabilities: Option<BTreeMap<NoteId, f64>>,
}

/// One rectangle per note, highest pitch at the top.
pub fn svg(roll: &PianoRoll, overlay: &Overlay, opts: &RenderOptions) -> String {
    let s = opts.scale;
    let (w, h) = (roll.cols() as f64 * s, PITCHES as f64 * s);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (id, span) in roll.spans() {
        let (color, opacity) = match &overlay.probabilities {
            Some(p) => (&opts.melody_color, p.get(id).copied().unwrap_or(0.0).clamp(0.0, 1.0)),
            None if overlay.melody.contains(id) => (&opts.melody_color, 1.0),
            None => (&opts.accompaniment_color, 1.0),
        };
        let _ = writeln!(
            out,
            r#"<rect data-note="{id}" x="{}" y="{}" width="{}" height="{s}" fill="{color}" fill-opacity="{opacity}"/>"#,
            span.start_col as f64 * s,
            (PITCHES - 1 - span.row) as f64 * s,
            span.width() as f64 * s,
        );
    }
    out.push_str("</svg>\n");
    out
}
