//! Melody line identification in symbolic scores.
//!
//! A score is rasterized into a binary piano roll, cut into overlapping
//! windows and passed through a small fully-convolutional network that
//! estimates, per pixel, the probability of belonging to the melody. Window
//! outputs are averaged, masked by the input and reduced to one probability
//! per note. A per-piece threshold found by single-linkage clustering keeps
//! the melody notes (`cnn`); a shortest path through a digraph of the kept
//! notes yields a strictly monophonic line (`cnn_mono`).
//!
//! The skyline heuristic and a contig-style voice separation are included
//! as baselines, together with note-level F-measure evaluation and
//! occlusion saliency maps.

pub mod baselines;
pub mod convnet;
pub mod error;
pub mod evaluation;
pub mod melody_select;
pub mod pianoroll;
pub mod pipeline;
pub mod saliency;
pub mod score_io;
pub mod synth;

pub use error::{Error, Result};
pub use pipeline::{predict, Method, Prediction, WindowModel};
pub use score_io::{Note, NoteId, Score};
