//! Best-fit format selection and layer-wise format refinement.
//!
//! Candidates for a tensor are anchored at the bias-star bias: the largest
//! bias whose window still contains the tensor's largest magnitude. Moving the
//! bias up from there would clip the maximum; moving it down only coarsens the
//! grid. The sweep tries `K` biases below the anchor plus the conventional
//! default bias for each exponent width.
//!
//! Layer-wise optimization runs in fixed stages:
//!
//! 1. collect weight statistics and calibration activations per dense layer;
//! 2. choose one global format per role from whole-model data;
//! 3. keep the global exponent width and give each layer its own bias-star bias;
//! 4. drop the sign bit of activations that are nonnegative on the calibration set
//!    (the freed bit goes to the fraction);
//! 5. with the accuracy objective, keep a per-layer refinement only if
//!    calibration accuracy does not decrease.
//!
//! The activation format of a layer applies to the activation that layer
//! reads: the network input for the first layer, the previous layer's ReLU
//! output for the rest.

use std::cmp::Ordering;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{error_metrics_values, AnalysisError, TensorStats};
use crate::bundle::{BundleError, ModelBundle, QuantReport, Role, Tensor};
use crate::format::{default_bias, floor_log2, pow2, range_window, FormatError, FormatSpec, MAX_BIAS, MIN_BIAS};
use crate::refnet::{self, Matrix, Mode, RefnetError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("maximum magnitude must be positive and finite, got {0}")]
    NonPositiveMax(f64),
    #[error("no candidate formats to evaluate")]
    EmptyCandidates,
    #[error("model has no dense layers")]
    EmptyModel,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("assignment lists layer {0:?} more than once")]
    DuplicateLayer(String),
    #[error("assignment record for layer {layer:?} has unknown role {role:?}")]
    UnknownRole { layer: String, role: String },
    #[error("assignment for layer {0:?} lacks a weight or activation record")]
    IncompleteLayer(String),
    #[error("invalid assignment JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Refnet(#[from] RefnetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Tensor-local signal-to-quantization-noise ratio.
    Sqnr,
    /// Top-1 accuracy on the calibration set.
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchConfig {
    pub y_range: RangeInclusive<u8>,
    /// How many biases below bias-star to try.
    pub bias_sweep: u32,
    pub allow_unsigned: bool,
    /// Total bit width of every candidate.
    pub width: u8,
    pub objective: Objective,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            y_range: 1..=6,
            bias_sweep: 8,
            allow_unsigned: true,
            width: 8,
            objective: Objective::Sqnr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasStar {
    pub bias: i32,
    /// The unclamped bias fell outside `[-128, 127]`.
    pub clamped: bool,
}

/// Largest bias `b` with `(2 - 2^-z) * 2^(2^y - 1 - b) >= max_mag`.
pub fn bias_star(y: u8, z: u8, max_mag: f64) -> Result<BiasStar, SearchError> {
    if !(max_mag > 0.0 && max_mag.is_finite()) {
        return Err(SearchError::NonPositiveMax(max_mag));
    }
    let top_significand = 2.0 - pow2(-i32::from(z));
    // smallest top-binade exponent whose window max reaches max_mag
    let k = floor_log2(max_mag);
    let exp = if max_mag <= top_significand * pow2(k) { k } else { k + 1 };
    let unclamped = (1i64 << y) - 1 - i64::from(exp);
    let bias = unclamped.clamp(MIN_BIAS.into(), MAX_BIAS.into()) as i32;
    Ok(BiasStar {
        bias,
        clamped: i64::from(bias) != unclamped,
    })
}

/// Whether the sign bit can be dropped for data with these statistics.
pub fn elide_sign(stats: &TensorStats) -> bool {
    stats.negative_count == 0
}

/// Deterministic candidate list for a tensor.
pub fn candidate_formats(stats: &TensorStats, cfg: &SearchConfig) -> Vec<FormatSpec> {
    let sign_bits = if cfg.allow_unsigned && elide_sign(stats) { 0 } else { 1 };
    let mut out: Vec<FormatSpec> = Vec::new();
    let mut push = |f: Result<FormatSpec, FormatError>| {
        if let Ok(f) = f {
            if !out.contains(&f) {
                out.push(f);
            }
        }
    };
    for y in cfg.y_range.clone() {
        let Some(z) = cfg.width.checked_sub(sign_bits + y) else {
            continue;
        };
        if stats.max_mag > 0.0 {
            if let Ok(star) = bias_star(y, z, f64::from(stats.max_mag)) {
                for step in 0..=i64::from(cfg.bias_sweep) {
                    let b = i64::from(star.bias) - step;
                    if b < i64::from(MIN_BIAS) {
                        break;
                    }
                    push(FormatSpec::new(sign_bits, y, z, b as i32, cfg.width));
                }
            }
        }
        push(FormatSpec::new(sign_bits, y, z, default_bias(y), cfg.width));
    }
    out
}

/// Fixed preference between two scored candidates: higher score, then smaller
/// `y`, then larger bias, then unsigned.
pub fn compare_candidates(a: (FormatSpec, f64), b: (FormatSpec, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
        .then_with(|| b.0.exponent_bits().cmp(&a.0.exponent_bits()))
        .then_with(|| a.0.bias().cmp(&b.0.bias()))
        .then_with(|| b.0.sign_bits().cmp(&a.0.sign_bits()))
}

/// Scores every candidate (in parallel) and returns the preferred one with its score.
pub fn select_by<F>(candidates: &[FormatSpec], score: F) -> Result<(FormatSpec, f64), SearchError>
where
    F: Fn(FormatSpec) -> Result<f64, SearchError> + Sync,
{
    let scored = candidates
        .par_iter()
        .map(|&f| score(f).map(|s| (f, s)))
        .collect::<Result<Vec<_>, _>>()?;
    scored
        .into_iter()
        .max_by(|a, b| compare_candidates(*a, *b))
        .ok_or(SearchError::EmptyCandidates)
}

/// Best-fit format for raw values under the SQNR objective.
pub fn select_format_values(values: &[f32], cfg: &SearchConfig) -> Result<(FormatSpec, QuantReport), SearchError> {
    let stats = TensorStats::from_values(values)?;
    let mut candidates = candidate_formats(&stats, cfg);
    // never trade the max away for precision when some candidate keeps it
    let covers = |f: &FormatSpec| range_window(*f).max >= f64::from(stats.max_mag);
    if candidates.iter().any(covers) {
        candidates.retain(covers);
    }
    let (best, _) = select_by(&candidates, |f| Ok(error_metrics_values(values, f)?.sqnr_db))?;
    Ok((best, error_metrics_values(values, best)?))
}

pub fn select_format(t: &Tensor, cfg: &SearchConfig) -> Result<(FormatSpec, QuantReport), SearchError> {
    select_format_values(t.as_fp32()?, cfg)
}

/// Formats chosen for one dense layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFormats {
    pub layer: String,
    pub weight: FormatSpec,
    pub activation: FormatSpec,
}

/// One row of the serialized assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub layer: String,
    pub role: String,
    pub x: u8,
    pub y: u8,
    pub z: u8,
    pub b: i32,
}

/// Per-layer, per-role formats.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub layers: Vec<LayerFormats>,
    /// Whole-model formats the per-layer ones were refined from, when known.
    pub global_weight: Option<FormatSpec>,
    pub global_activation: Option<FormatSpec>,
}

impl Assignment {
    pub fn from_layers(layers: Vec<LayerFormats>) -> Self {
        Assignment {
            layers,
            global_weight: None,
            global_activation: None,
        }
    }

    /// The same weight and activation format for every named layer.
    pub fn uniform(layers: &[String], weight: FormatSpec, activation: FormatSpec) -> Self {
        Assignment {
            layers: layers
                .iter()
                .map(|l| LayerFormats {
                    layer: l.clone(),
                    weight,
                    activation,
                })
                .collect(),
            global_weight: Some(weight),
            global_activation: Some(activation),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFormats> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn format_for(&self, layer: &str, role: Role) -> Option<FormatSpec> {
        self.layer(layer).map(|l| match role {
            Role::Weight => l.weight,
            Role::Activation => l.activation,
        })
    }

    pub fn to_records(&self) -> Vec<AssignmentRecord> {
        let record = |layer: &str, role: Role, f: FormatSpec| AssignmentRecord {
            layer: layer.to_string(),
            role: role.as_str().to_string(),
            x: f.sign_bits(),
            y: f.exponent_bits(),
            z: f.fraction_bits(),
            b: f.bias(),
        };
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    record(&l.layer, Role::Weight, l.weight),
                    record(&l.layer, Role::Activation, l.activation),
                ]
            })
            .collect()
    }

    /// Rebuilds an assignment from records; layer order follows first appearance.
    pub fn from_records(records: &[AssignmentRecord]) -> Result<Self, SearchError> {
        let mut partial: Vec<(String, Option<FormatSpec>, Option<FormatSpec>)> = Vec::new();
        for r in records {
            let f = FormatSpec::from_fields(r.x, r.y, r.z, r.b)?;
            let idx = match partial.iter().position(|p| p.0 == r.layer) {
                Some(i) => i,
                None => {
                    partial.push((r.layer.clone(), None, None));
                    partial.len() - 1
                }
            };
            let slot = match r.role.as_str() {
                "weight" => &mut partial[idx].1,
                "activation" => &mut partial[idx].2,
                other => {
                    return Err(SearchError::UnknownRole {
                        layer: r.layer.clone(),
                        role: other.to_string(),
                    })
                }
            };
            if slot.replace(f).is_some() {
                return Err(SearchError::DuplicateLayer(r.layer.clone()));
            }
        }
        let layers = partial
            .into_iter()
            .map(|(layer, w, a)| match (w, a) {
                (Some(weight), Some(activation)) => Ok(LayerFormats {
                    layer,
                    weight,
                    activation,
                }),
                _ => Err(SearchError::IncompleteLayer(layer)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Assignment::from_layers(layers))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_records()).expect("records serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, SearchError> {
        let records: Vec<AssignmentRecord> = serde_json::from_str(s)?;
        Self::from_records(&records)
    }
}

/// Calibration batch for layer-wise optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub inputs: Matrix,
    /// Needed only for the accuracy objective.
    pub labels: Vec<usize>,
}

/// Per-layer data gathered in stage 1.
#[derive(Debug, Clone)]
struct LayerData {
    weights: Vec<f32>,
    weight_stats: TensorStats,
    activations: Vec<f32>,
    activation_stats: TensorStats,
}

fn concat<'a>(parts: impl Iterator<Item = &'a [f32]>) -> Vec<f32> {
    parts.flat_map(|p| p.iter().copied()).collect()
}

/// Bias-star refinement of `global` for one tensor, keeping `y` and, unless
/// the sign can be dropped, `x`.
fn refine(global: FormatSpec, stats: &TensorStats, allow_unsigned: bool) -> Result<FormatSpec, SearchError> {
    let sign_bits = if global.sign_bits() == 0 || (allow_unsigned && elide_sign(stats)) {
        0
    } else {
        1
    };
    let y = global.exponent_bits();
    let z = global.width() - sign_bits - y;
    let bias = if stats.max_mag > 0.0 {
        bias_star(y, z, f64::from(stats.max_mag))?.bias
    } else {
        global.bias()
    };
    Ok(FormatSpec::new(sign_bits, y, z, bias, global.width())?)
}

/// Per-layer format assignment for a refnet model.
pub fn layerwise_optimize(model: &ModelBundle, calib: &Calibration, cfg: &SearchConfig) -> Result<Assignment, SearchError> {
    // stage 1
    let names = refnet::dense_layer_names(model);
    if names.is_empty() {
        return Err(SearchError::EmptyModel);
    }
    if calib.inputs.rows == 0 || (cfg.objective == Objective::Accuracy && calib.labels.is_empty()) {
        return Err(SearchError::EmptyCalibration);
    }
    let activations = refnet::capture_activations(model, &calib.inputs)?;
    let layers = names
        .iter()
        .zip(activations)
        .map(|(name, (_, acts))| {
            let weights = refnet::layer_weights(model, name)?.as_fp32()?.to_vec();
            Ok(LayerData {
                weight_stats: TensorStats::from_values(&weights)?,
                weights,
                activation_stats: TensorStats::from_values(&acts)?,
                activations: acts,
            })
        })
        .collect::<Result<Vec<_>, SearchError>>()?;

    // stage 2
    let all_weights = concat(layers.iter().map(|l| l.weights.as_slice()));
    let all_acts = concat(layers.iter().map(|l| l.activations.as_slice()));
    let (mut global_act, _) = select_format_values(&all_acts, cfg)?;
    let (mut global_weight, _) = select_format_values(&all_weights, cfg)?;
    let accuracy_of = |a: &Assignment| -> Result<f64, SearchError> {
        Ok(refnet::accuracy(model, Mode::Quantized(a), &calib.inputs, &calib.labels)?)
    };
    if cfg.objective == Objective::Accuracy {
        let weight_candidates = candidate_formats(&TensorStats::from_values(&all_weights)?, cfg);
        global_weight = select_by(&weight_candidates, |w| accuracy_of(&Assignment::uniform(&names, w, global_act)))?.0;
        let act_candidates = candidate_formats(&TensorStats::from_values(&all_acts)?, cfg);
        global_act = select_by(&act_candidates, |a| accuracy_of(&Assignment::uniform(&names, global_weight, a)))?.0;
    }

    // stages 3 and 4
    let mut assignment = Assignment::uniform(&names, global_weight, global_act);
    let refined: Vec<(FormatSpec, FormatSpec)> = layers
        .iter()
        .map(|l| {
            Ok((
                refine(global_weight, &l.weight_stats, false)?,
                refine(global_act, &l.activation_stats, cfg.allow_unsigned)?,
            ))
        })
        .collect::<Result<_, SearchError>>()?;

    if cfg.objective == Objective::Sqnr {
        for (slot, (w, a)) in assignment.layers.iter_mut().zip(refined) {
            slot.weight = w;
            slot.activation = a;
        }
        return Ok(assignment);
    }

    // stage 5: greedy accept-if-not-worse, layer by layer, weights first
    let mut current = accuracy_of(&assignment)?;
    for (i, (w, a)) in refined.into_iter().enumerate() {
        for role in [Role::Weight, Role::Activation] {
            let mut trial = assignment.clone();
            match role {
                Role::Weight => trial.layers[i].weight = w,
                Role::Activation => trial.layers[i].activation = a,
            }
            if trial == assignment {
                continue;
            }
            let acc = accuracy_of(&trial)?;
            if acc >= current {
                current = acc;
                assignment = trial;
            }
        }
    }
    Ok(assignment)
}
