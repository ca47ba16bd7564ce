//! Error-bounded, region-adaptive lossy compression for gridded
//! spatiotemporal floating-point fields.
//!
//! The pipeline partitions a field into patches, predicts each patch with a
//! cheap deterministic predictor (or an externally supplied reconstruction),
//! projects the prediction residual onto a trained orthonormal basis, and
//! keeps just enough quantized coefficients that every patch meets its
//! assigned l2 error bound. Patches are classified as ROI, buffer, or
//! background so regions of interest can be held to a tighter bound than the
//! rest of the domain. Everything is packed into a checksummed `.gaec`
//! archive that decodes deterministically.

pub mod bits;
pub mod container;
pub mod entropy;
pub mod grid;
pub mod guarantee;
pub mod metrics;
pub mod predictor;
pub mod roi;
pub mod synth;

pub use container::{compress, decompress, Archive, CompressConfig};
pub use entropy::{Quantizer, QuantizedValue};
pub use grid::{Field, PadPolicy, PartitionSpec, PatchUnit, Shape};
pub use guarantee::{Correction, ResidualBasis};
pub use predictor::PredictorKind;
pub use roi::{PatchClass, PatchClassMap, RoiMask};
