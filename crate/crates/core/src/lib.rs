//! Weakly supervised face–name alignment.
//!
//! Faces and names from an image–caption pair are projected into a common
//! space and trained with dense set similarities, so no face–name labels are
//! needed. Alignment picks, per face, its most similar name (or NONAME) and
//! marks leftover names as NOFACE.

pub mod alignment;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;

pub use alignment::{align_dataset, align_faces_names, align_pair, AlignOptions, Link, LinkSet, ScoredLink};
pub use datasets::{load_dataset, make_easy_split, synth_generate, Dataset, ImageCaptionPair, SynthConfig, TrainPair};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalCounts, MetricsReport};
pub use model::{ModelDims, NameRecord, ProjectorStack};
pub use training::{train_pipeline_heuristic, train_secla, train_secla_b, PrototypeKind, TrainConfig};
