//! Retrieval-augmented generation of editable UI prototypes.
//!
//! A design prompt and a wireframe layout go in; an SVG prototype comes out,
//! together with every intermediate artifact (retrieved references, theme
//! description, theme image, per-component prompts and results). Generation is
//! coordinated by a central theme module that dispatches each component to a
//! text, image or icon sub-module and threads their results through an
//! append-only cache pool.
//!
//! All model calls go through the traits in [`backends`]; deterministic mock
//! implementations make the whole pipeline reproducible offline.

pub mod assembler;
pub mod backends;
pub mod evalkit;
pub mod image;
pub mod kb;
pub mod orchestrator;
pub mod retrieval;
pub mod submodules;

pub use assembler::Prototype;
pub use backends::Backends;
pub use image::RasterImage;
pub use kb::{BBox, Canvas, ComponentType, IconRecord, KnowledgeRecord, Layout};
pub use orchestrator::{DesignInput, GenerationTrace, PipelineConfig};
