//! A small dense/ReLU classifier that stores weights and activations in FFP8
//! while computing in FP32.
//!
//! The network is a linear chain `input -> (dense -> relu)* -> dense -> output`.
//! In quantized mode every dense layer reads its weights through the assigned
//! weight format and its input activation through the assigned activation
//! format, modelling the converters at the off-chip boundary. Logits leave the
//! last dense layer unquantized. Biases stay in FP32.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::analysis::{AnalysisError, TensorStats};
use crate::bundle::{BundleError, Layer, LayerKind, ModelBundle, Payload, Role, Tensor};
use crate::format::{Codec, FormatError, FormatSpec};
use crate::search::Assignment;

/// Standard deviation of the class centers around the origin, before standardization.
pub const CENTER_SPREAD: f64 = 1.0;
/// Standard deviation of each sample around its class center.
pub const SAMPLE_NOISE: f64 = 1.0;
/// Fraction of samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum RefnetError {
    #[error("dataset sizes must be positive (samples {samples}, features {features}, classes {classes})")]
    BadSizes {
        samples: usize,
        features: usize,
        classes: usize,
    },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedTraining { epoch: usize, loss: f32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("assignment has no formats for layer {0:?}")]
    MissingAssignment(String),
    #[error("malformed model: {0}")]
    BadModel(String),
    #[error("format {0} cannot be expanded to binary32 exactly")]
    NotBinary32(FormatSpec),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Row-major FP32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, RefnetError> {
        if data.len() != rows * cols {
            return Err(RefnetError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// Gaussian-blob classification data, standardized per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Rows `[0, train_len)` train, the rest validate.
    pub train_len: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn train(&self) -> (Matrix, &[usize]) {
        (self.inputs.slice_rows(0, self.train_len), &self.labels[..self.train_len])
    }

    pub fn validation(&self) -> (Matrix, &[usize]) {
        (
            self.inputs.slice_rows(self.train_len, self.inputs.rows),
            &self.labels[self.train_len..],
        )
    }
}

/// Generates a deterministic blob dataset.
///
/// Class centers are drawn from `N(0, CENTER_SPREAD^2)` per feature, sample
/// `i` of the unshuffled list belongs to class `i mod n_classes`, points get
/// `N(0, SAMPLE_NOISE^2)` noise, the list is shuffled, and every feature is
/// standardized to zero mean and unit variance. The last
/// `floor(0.2 * n_samples)` rows form the validation split.
pub fn make_dataset(seed: u64, n_samples: usize, n_features: usize, n_classes: usize) -> Result<ToyDataset, RefnetError> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(RefnetError::BadSizes {
            samples: n_samples,
            features: n_features,
            classes: n_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Normal::new(0.0, CENTER_SPREAD).expect("valid spread");
    let noise = Normal::new(0.0, SAMPLE_NOISE).expect("valid noise");
    let center_table: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| centers.sample(&mut rng)).collect())
        .collect();

    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);

    let mut raw = vec![0.0f64; n_samples * n_features];
    let mut labels = Vec::with_capacity(n_samples);
    for (row, &i) in order.iter().enumerate() {
        let class = i % n_classes;
        labels.push(class);
        for (j, c) in center_table[class].iter().enumerate() {
            raw[row * n_features + j] = c + noise.sample(&mut rng);
        }
    }
    for j in 0..n_features {
        let col = (0..n_samples).map(|r| raw[r * n_features + j]);
        let mean = col.clone().sum::<f64>() / n_samples as f64;
        let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_samples as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..n_samples {
            let v = &mut raw[r * n_features + j];
            *v = (*v - mean) / std;
        }
    }
    let validation = (VALIDATION_FRACTION * n_samples as f64).floor() as usize;
    Ok(ToyDataset {
        inputs: Matrix {
            rows: n_samples,
            cols: n_features,
            data: raw.into_iter().map(|v| v as f32).collect(),
        },
        labels,
        n_classes,
        train_len: n_samples - validation,
        seed,
    })
}

/// Fixed training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32, 32],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    name: String,
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weight: Vec<f32>,
    bias: Vec<f32>,
    relu: bool,
}

impl Dense {
    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn apply(&self, input: &Matrix, weight: &[f32]) -> Matrix {
        let mut out = Matrix::zeros(input.rows, self.outputs);
        for r in 0..input.rows {
            let x = input.row(r);
            for o in 0..self.outputs {
                let w = &weight[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (a, b) in w.iter().zip(x) {
                    acc += a * b;
                }
                out.data[r * self.outputs + o] = acc;
            }
        }
        out
    }
}

/// In-memory view of a refnet bundle.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Dense>,
    /// Formats of weight tensors stored as codes, by layer index.
    stored_formats: Vec<Option<FormatSpec>>,
}

impl Mlp {
    fn init(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let he = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive fan-in");
                Dense {
                    name: format!("fc{}", i + 1),
                    inputs,
                    outputs,
                    weight: (0..inputs * outputs).map(|_| he.sample(&mut rng) as f32).collect(),
                    bias: vec![0.0; outputs],
                    relu: i + 2 < sizes.len(),
                }
            })
            .collect::<Vec<_>>();
        let stored_formats = vec![None; layers.len()];
        Mlp { layers, stored_formats }
    }

    fn from_bundle(m: &ModelBundle) -> Result<Self, RefnetError> {
        let mut layers: Vec<Dense> = Vec::new();
        let mut stored_formats = Vec::new();
        for layer in &m.layers {
            match layer.kind {
                LayerKind::Dense => {
                    let [w, b] = layer.tensors.as_slice() else {
                        return Err(RefnetError::BadModel(format!(
                            "dense layer {:?} must reference [weight, bias]",
                            layer.name
                        )));
                    };
                    let w = m.tensor(w).ok_or_else(|| BundleError::MissingTensor(w.clone()))?;
                    let b = m.tensor(b).ok_or_else(|| BundleError::MissingTensor(b.clone()))?;
                    let [outputs, inputs] = w.shape.as_slice() else {
                        return Err(RefnetError::BadModel(format!("weight {:?} is not rank 2", w.name)));
                    };
                    if b.shape.as_slice() != [*outputs] {
                        return Err(RefnetError::BadModel(format!("bias {:?} does not match {:?}", b.name, w.name)));
                    }
                    if let Some(prev) = layers.last() {
                        if prev.outputs != *inputs {
                            return Err(RefnetError::ShapeMismatch(format!(
                                "{} feeds {} values into {} expecting {}",
                                prev.name, prev.outputs, layer.name, inputs
                            )));
                        }
                    }
                    if let Some(fmt) = w.format() {
                        check_binary32(fmt)?;
                    }
                    stored_formats.push(w.format());
                    layers.push(Dense {
                        name: layer.name.clone(),
                        inputs: *inputs,
                        outputs: *outputs,
                        weight: w.to_fp32_values()?,
                        bias: b.to_fp32_values()?,
                        relu: false,
                    });
                }
                LayerKind::Relu => match layers.last_mut() {
                    Some(d) if !d.relu => d.relu = true,
                    _ => return Err(RefnetError::BadModel(format!("relu {:?} does not follow a dense layer", layer.name))),
                },
                LayerKind::Input | LayerKind::Output => {}
            }
        }
        if layers.is_empty() {
            return Err(RefnetError::BadModel("no dense layers".into()));
        }
        Ok(Mlp { layers, stored_formats })
    }

    fn to_bundle(&self, metadata: Vec<(String, String)>) -> ModelBundle {
        let mut layers = vec![Layer {
            name: "input".into(),
            kind: LayerKind::Input,
            tensors: vec![],
        }];
        let mut tensors = Vec::new();
        for (i, d) in self.layers.iter().enumerate() {
            layers.push(Layer {
                name: d.name.clone(),
                kind: LayerKind::Dense,
                tensors: vec![d.weight_name(), d.bias_name()],
            });
            if d.relu {
                layers.push(Layer {
                    name: format!("relu{}", i + 1),
                    kind: LayerKind::Relu,
                    tensors: vec![],
                });
            }
            tensors.push(Tensor {
                name: d.weight_name(),
                role: Role::Weight,
                shape: vec![d.outputs, d.inputs],
                payload: Payload::Fp32(d.weight.clone()),
            });
            tensors.push(Tensor {
                name: d.bias_name(),
                role: Role::Weight,
                shape: vec![d.outputs],
                payload: Payload::Fp32(d.bias.clone()),
            });
        }
        layers.push(Layer {
            name: "output".into(),
            kind: LayerKind::Output,
            tensors: vec![],
        });
        ModelBundle {
            layers,
            tensors,
            metadata,
        }
    }
}

fn check_binary32(fmt: FormatSpec) -> Result<(), RefnetError> {
    if fmt.fits_binary32() {
        Ok(())
    } else {
        Err(RefnetError::NotBinary32(fmt))
    }
}

fn round_through(values: &[f32], fmt: FormatSpec) -> Result<Vec<f32>, RefnetError> {
    check_binary32(fmt)?;
    let codec = Codec::new(fmt);
    values
        .iter()
        .map(|&v| Ok(codec.round(f64::from(v))? as f32))
        .collect()
}

fn softmax_cross_entropy(logits: &[f32], label: usize, grad: &mut [f32]) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = -(grad[label].max(f32::MIN_POSITIVE)).ln();
    grad[label] -= 1.0;
    loss
}

/// Trains an FP32 classifier with plain mini-batch gradient descent.
pub fn train_baseline(ds: &ToyDataset, cfg: &TrainConfig) -> Result<ModelBundle, RefnetError> {
    let mut sizes = vec![ds.inputs.cols];
    sizes.extend(&cfg.hidden);
    sizes.push(ds.n_classes);
    let mut net = Mlp::init(&sizes, cfg.seed);
    let (inputs, labels) = ds.train();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.rows).collect();
    let batch_size = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f32;
        for chunk in order.chunks(batch_size) {
            let batch = inputs.select_rows(chunk);
            // forward, keeping every layer's input and output
            let mut acts = vec![batch];
            for d in &net.layers {
                let mut out = d.apply(acts.last().unwrap(), &d.weight);
                if d.relu {
                    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(out);
            }
            let logits = acts.last().unwrap();
            let mut delta = Matrix::zeros(logits.rows, logits.cols);
            for (r, &i) in chunk.iter().enumerate() {
                let grad = &mut delta.data[r * logits.cols..(r + 1) * logits.cols];
                epoch_loss += softmax_cross_entropy(logits.row(r), labels[i], grad);
            }
            let scale = 1.0 / chunk.len() as f32;
            delta.data.iter_mut().for_each(|g| *g *= scale);

            for (li, d) in net.layers.iter_mut().enumerate().rev() {
                let input = &acts[li];
                let mut back = Matrix::zeros(input.rows, d.inputs);
                for r in 0..input.rows {
                    for o in 0..d.outputs {
                        let g = delta.data[r * d.outputs + o];
                        if g == 0.0 {
                            continue;
                        }
                        let w = &d.weight[o * d.inputs..(o + 1) * d.inputs];
                        let b = &mut back.data[r * d.inputs..(r + 1) * d.inputs];
                        for (bv, wv) in b.iter_mut().zip(w) {
                            *bv += g * wv;
                        }
                    }
                }
                let mut grad_w = vec![0.0f32; d.weight.len()];
                let mut grad_b = vec![0.0f32; d.outputs];
                for r in 0..input.rows {
                    let x = input.row(r);
                    for o in 0..d.outputs {
                        let g = delta.data[r * d.outputs + o];
                        grad_b[o] += g;
                        let gw = &mut grad_w[o * d.inputs..(o + 1) * d.inputs];
                        for (gv, xv) in gw.iter_mut().zip(x) {
                            *gv += g * xv;
                        }
                    }
                }
                for (w, g) in d.weight.iter_mut().zip(&grad_w) {
                    *w -= cfg.learning_rate * g;
                }
                for (b, g) in d.bias.iter_mut().zip(&grad_b) {
                    *b -= cfg.learning_rate * g;
                }
                // the previous layer's output went through ReLU when li > 0
                if li > 0 {
                    for (bv, xv) in back.data.iter_mut().zip(&input.data) {
                        if *xv <= 0.0 {
                            *bv = 0.0;
                        }
                    }
                }
                delta = back;
            }
        }
        if !epoch_loss.is_finite() {
            return Err(RefnetError::DivergedTraining { epoch, loss: epoch_loss });
        }
    }

    let metadata = vec![
        ("model".to_string(), "refnet".to_string()),
        ("dataset_seed".to_string(), ds.seed.to_string()),
        ("dataset_samples".to_string(), ds.inputs.rows.to_string()),
        ("dataset_features".to_string(), ds.inputs.cols.to_string()),
        ("dataset_classes".to_string(), ds.n_classes.to_string()),
        ("train_seed".to_string(), cfg.seed.to_string()),
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("learning_rate".to_string(), cfg.learning_rate.to_string()),
    ];
    Ok(net.to_bundle(metadata))
}

/// How a forward pass treats stored tensors.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Fp32,
    Quantized(&'a Assignment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: String,
    /// Activation as read by the layer (after quantization in quantized mode).
    pub input: Matrix,
    pub pre_activation: Matrix,
    pub post_activation: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

fn run(net: &Mlp, batch: &Matrix, mode: Mode<'_>) -> Result<(Matrix, ForwardTrace), RefnetError> {
    if batch.cols != net.layers[0].inputs {
        return Err(RefnetError::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            batch.cols, net.layers[0].inputs
        )));
    }
    let mut trace = ForwardTrace::default();
    let mut current = batch.clone();
    for (i, d) in net.layers.iter().enumerate() {
        let (input, weight) = match mode {
            Mode::Fp32 => (current, d.weight.clone()),
            Mode::Quantized(assignment) => {
                let formats = assignment
                    .layer(&d.name)
                    .ok_or_else(|| RefnetError::MissingAssignment(d.name.clone()))?;
                let weight = match net.stored_formats[i] {
                    // already decoded from its own codes
                    Some(_) => d.weight.clone(),
                    None => round_through(&d.weight, formats.weight)?,
                };
                let input = Matrix {
                    data: round_through(&current.data, formats.activation)?,
                    ..current
                };
                (input, weight)
            }
        };
        let pre = d.apply(&input, &weight);
        let mut post = pre.clone();
        if d.relu {
            post.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        current = post.clone();
        trace.layers.push(LayerTrace {
            layer: d.name.clone(),
            input,
            pre_activation: pre,
            post_activation: post,
        });
    }
    Ok((current, trace))
}

/// Runs the model on `batch`, returning logits and per-layer tensors.
pub fn forward(model: &ModelBundle, batch: &Matrix, mode: Mode<'_>) -> Result<(Matrix, ForwardTrace), RefnetError> {
    run(&Mlp::from_bundle(model)?, batch, mode)
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `inputs` whose argmax logit equals the label.
pub fn accuracy(model: &ModelBundle, mode: Mode<'_>, inputs: &Matrix, labels: &[usize]) -> Result<f64, RefnetError> {
    if inputs.rows != labels.len() {
        return Err(RefnetError::ShapeMismatch(format!(
            "{} rows but {} labels",
            inputs.rows,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (logits, _) = forward(model, inputs, mode)?;
    let correct = (0..logits.rows)
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Validation-split Top-1 accuracy, FP32 or under an assignment.
pub fn evaluate(model: &ModelBundle, assignment: Option<&Assignment>, ds: &ToyDataset) -> Result<f64, RefnetError> {
    let (inputs, labels) = ds.validation();
    let mode = assignment.map_or(Mode::Fp32, Mode::Quantized);
    accuracy(model, mode, &inputs, labels)
}

/// FP32 activations read by each dense layer: the network input for the first
/// layer, the previous layer's post-ReLU output for the rest.
pub fn capture_activations(model: &ModelBundle, batch: &Matrix) -> Result<Vec<(String, Vec<f32>)>, RefnetError> {
    let (_, trace) = forward(model, batch, Mode::Fp32)?;
    Ok(trace
        .layers
        .into_iter()
        .map(|l| (l.layer, l.input.data))
        .collect())
}

/// Statistics of [`capture_activations`], per dense layer.
pub fn collect_activation_stats(model: &ModelBundle, batch: &Matrix) -> Result<Vec<(String, TensorStats)>, RefnetError> {
    capture_activations(model, batch)?
        .into_iter()
        .map(|(name, values)| Ok((name, TensorStats::from_values(&values)?)))
        .collect()
}

/// Names of the dense layers, in forward order.
pub fn dense_layer_names(model: &ModelBundle) -> Vec<String> {
    model.dense_layers().map(|l| l.name.clone()).collect()
}

/// FP32 weight matrix of a dense layer, decoding codes when stored quantized.
pub fn layer_weights(model: &ModelBundle, layer: &str) -> Result<Tensor, RefnetError> {
    let l = model
        .layers
        .iter()
        .find(|l| l.name == layer && l.kind == LayerKind::Dense)
        .ok_or_else(|| RefnetError::BadModel(format!("no dense layer {layer:?}")))?;
    let name = l
        .tensors
        .first()
        .ok_or_else(|| RefnetError::BadModel(format!("layer {layer:?} has no weight")))?;
    let t = model
        .tensor(name)
        .ok_or_else(|| BundleError::MissingTensor(name.clone()))?;
    Ok(Tensor {
        name: t.name.clone(),
        role: t.role,
        shape: t.shape.clone(),
        payload: Payload::Fp32(t.to_fp32_values()?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::LayerFormats;

    fn tiny() -> (ToyDataset, ModelBundle) {
        let ds = make_dataset(3, 120, 4, 3).unwrap();
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 5,
            ..TrainConfig::default()
        };
        let m = train_baseline(&ds, &cfg).unwrap();
        (ds, m)
    }

    #[test]
    fn dataset_is_deterministic() {
        assert_eq!(make_dataset(7, 1000, 16, 3).unwrap(), make_dataset(7, 1000, 16, 3).unwrap());
        assert_ne!(make_dataset(7, 100, 4, 3).unwrap().inputs, make_dataset(8, 100, 4, 3).unwrap().inputs);
    }

    #[test]
    fn dataset_balance_and_split() {
        let ds = make_dataset(1, 999, 4, 3).unwrap();
        let mut counts = [0usize; 3];
        ds.labels.iter().for_each(|&l| counts[l] += 1);
        assert_eq!(counts, [333, 333, 333]);
        assert_eq!(ds.validation().1.len(), 199);
        let ds = make_dataset(1, 10, 2, 4).unwrap();
        let mut counts = [0usize; 4];
        ds.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn dataset_rejects_empty_sizes() {
        assert!(matches!(make_dataset(1, 0, 4, 3), Err(RefnetError::BadSizes { .. })));
        assert!(matches!(make_dataset(1, 10, 0, 3), Err(RefnetError::BadSizes { .. })));
        assert!(matches!(make_dataset(1, 10, 4, 0), Err(RefnetError::BadSizes { .. })));
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let ds = make_dataset(3, 60, 4, 3).unwrap();
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = train_baseline(&ds, &cfg).unwrap();
        let init = Mlp::init(&[4, 8, 3], cfg.seed);
        assert_eq!(Mlp::from_bundle(&m).unwrap(), init);
    }

    #[test]
    fn bundle_shape_is_a_chain() {
        let (_, m) = tiny();
        let kinds: Vec<LayerKind> = m.layers.iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            [LayerKind::Input, LayerKind::Dense, LayerKind::Relu, LayerKind::Dense, LayerKind::Output]
        );
        m.validate().unwrap();
    }

    #[test]
    fn zero_batch_gives_bias_rows() {
        let (_, m) = tiny();
        let batch = Matrix::zeros(3, 4);
        let (_, trace) = forward(&m, &batch, Mode::Fp32).unwrap();
        let bias = m.tensor("fc1.bias").unwrap().as_fp32().unwrap();
        for r in 0..3 {
            assert_eq!(trace.layers[0].pre_activation.row(r), bias);
        }
    }

    fn dyadic_model() -> ModelBundle {
        // weights k/8, inputs j/4: hidden activations are multiples of 1/32
        // below 17, all exactly representable in (1,5,10,15)
        let w1: Vec<f32> = (0..16).map(|i| ((i * 5) % 17) as f32 / 8.0 - 1.0).collect();
        let w2: Vec<f32> = (0..12).map(|i| ((i * 7) % 13) as f32 / 8.0 - 0.75).collect();
        let net = Mlp {
            layers: vec![
                Dense {
                    name: "fc1".into(),
                    inputs: 4,
                    outputs: 4,
                    weight: w1,
                    bias: vec![0.125, -0.25, 0.5, 0.0],
                    relu: true,
                },
                Dense {
                    name: "fc2".into(),
                    inputs: 4,
                    outputs: 3,
                    weight: w2,
                    bias: vec![0.0, 0.375, -0.125],
                    relu: false,
                },
            ],
            stored_formats: vec![None, None],
        };
        net.to_bundle(vec![])
    }

    #[test]
    fn wide_assignment_is_exact() {
        let m = dyadic_model();
        let wide = FormatSpec::from_fields(1, 5, 10, 15).unwrap();
        let batch = Matrix::from_vec(5, 4, (0..20).map(|i| ((i * 3) % 11) as f32 / 4.0 - 1.25).collect()).unwrap();
        let assignment = Assignment::from_layers(
            dense_layer_names(&m)
                .into_iter()
                .map(|layer| LayerFormats {
                    layer,
                    weight: wide,
                    activation: wide,
                })
                .collect(),
        );
        let (fp, fp_trace) = forward(&m, &batch, Mode::Fp32).unwrap();
        let (q, q_trace) = forward(&m, &batch, Mode::Quantized(&assignment)).unwrap();
        assert_eq!(fp_trace, q_trace);
        assert!(fp.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn narrow_assignment_changes_activations() {
        let m = dyadic_model();
        let narrow = FormatSpec::from_fields(1, 2, 1, 0).unwrap();
        let batch = Matrix::from_vec(1, 4, vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let assignment = Assignment::from_layers(
            dense_layer_names(&m)
                .into_iter()
                .map(|layer| LayerFormats {
                    layer,
                    weight: narrow,
                    activation: narrow,
                })
                .collect(),
        );
        let (_, trace) = forward(&m, &batch, Mode::Quantized(&assignment)).unwrap();
        let table = crate::format::enumerate_values(narrow);
        for lt in &trace.layers {
            assert!(lt.input.data.iter().all(|v| table.code_of(f64::from(*v)).is_some()));
        }
    }

    #[test]
    fn missing_assignment_is_an_error() {
        let (ds, m) = tiny();
        let empty = Assignment::from_layers(vec![]);
        assert!(matches!(
            forward(&m, &ds.inputs, Mode::Quantized(&empty)),
            Err(RefnetError::MissingAssignment(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (_, m) = tiny();
        assert!(matches!(
            forward(&m, &Matrix::zeros(2, 5), Mode::Fp32),
            Err(RefnetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn memorizes_tiny_dataset() {
        let ds = make_dataset(11, 10, 4, 2).unwrap();
        let cfg = TrainConfig {
            hidden: vec![16],
            epochs: 300,
            batch_size: 10,
            learning_rate: 0.1,
            seed: 1,
        };
        let m = train_baseline(&ds, &cfg).unwrap();
        let (inputs, labels) = ds.train();
        assert_eq!(accuracy(&m, Mode::Fp32, &inputs, labels).unwrap(), 1.0);
    }

    #[test]
    fn activation_stats_signs() {
        let (ds, m) = tiny();
        let stats = collect_activation_stats(&m, &ds.inputs).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats[0].1.negative_count > 0);
        assert!(stats[1..].iter().all(|(_, s)| s.negative_count == 0));
        assert_eq!(stats, collect_activation_stats(&m, &ds.inputs).unwrap());
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
