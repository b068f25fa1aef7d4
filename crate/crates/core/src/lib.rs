//! Flexible 8-bit floating-point (FFP8) formats and a post-training
//! quantization toolkit built on them.
//!
//! * [`format`]: format definitions, exact decode, round-to-nearest-even
//!   encode, range windows, and the FP32 converter.
//! * [`bundle`]: tensors, the `FFPB` container, tensor quantization.
//! * [`analysis`]: log2 histograms, window coverage, error metrics.
//! * [`search`]: bias-star rule, candidate search, layer-wise optimization.
//! * [`refnet`]: a small dense/ReLU network with FFP8 storage and FP32 compute.

pub mod analysis;
pub mod bundle;
pub mod format;
pub mod refnet;
pub mod search;

pub use analysis::{coverage, coverage_exact, error_metrics, error_metrics_values, tensor_stats, Coverage, TensorStats};
pub use bundle::{
    dequantize_tensor, quantize_tensor, read_bundle, write_bundle, Layer, LayerKind, ModelBundle, Payload, QuantReport,
    Role, Tensor,
};
pub use format::{
    decode, default_bias, encode_rne, enumerate_values, range_window, to_fp32_bits, FormatError, FormatSpec,
    RangeWindow, ValueTable,
};
pub use search::{
    bias_star, candidate_formats, elide_sign, layerwise_optimize, select_format, select_format_values, Assignment, Calibration, LayerFormats,
    Objective, SearchConfig,
};
