//! Seeded two-domain benchmarks.
//!
//! Detection scenes are small grayscale images with Gaussian "head" blobs
//! (annotated) and elongated distractor blobs (not annotated). The
//! classification benchmark draws class-conditional Gaussians whose target
//! domain is an affine transform of the source.

mod classify;
mod io;
mod scene;

pub use classify::{
    gen_classification_dataset, gen_classification_set, ClassDomainParams, ClassificationSpec,
    LabeledSet,
};
pub use io::{load_classification_set, load_dataset, save_classification_set, save_dataset};
pub use scene::{
    crop, extract_windows, gen_detection_dataset, gen_detection_range, sweep_windows, Annotation,
    Domain, DomainParams, Scene, WindowSample, DEFAULT_NEG_IOU, DEFAULT_POS_IOU,
};
