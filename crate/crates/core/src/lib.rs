//! Training-free scene-text image generation.
//!
//! The engine renders the requested text into a sketch, extracts a Canny
//! edge condition, and runs a deterministic DDIM reverse loop whose noise
//! prediction combines four denoiser evaluations (unconditional, text-only,
//! edge+text and box-outlined edge+text). Cross-attention maps of
//! region-descriptor tokens ("sign", "billboard", ...) are confined to the
//! text bounding box inside every denoiser call.
//!
//! Denoisers are pluggable through [`sampler::Denoiser`]: analytic
//! verification denoisers ship in [`sampler::denoisers`], and a pretrained
//! backbone can be reached over the framed protocol in [`wire`].

pub mod attention;
pub mod edges;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod raster;
pub mod sampler;
pub mod tokens;
pub mod wire;

pub use attention::{AttentionDirective, AttentionMap, Branches, ConstraintConfig};
pub use edges::{canny, CannyParams, EdgeImage};
pub use guidance::{ConditionSelector, GuidanceScales};
pub use raster::{BBox, BinaryGrid, GlyphAtlas, RegionMask, SketchImage};
pub use sampler::{LatentTensor, NoisePrediction, NoiseSchedule};
