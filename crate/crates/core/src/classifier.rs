//! The frozen referable/non-referable classifier under interpretation: a
//! VGG-style miniature with exactly five max-pool stages, batch norm after
//! every convolution, global average pooling, and a single fully connected
//! head, plus its training loop and diagnostic metrics.

use crate::diffcore::{
    apply_lookahead, remove_lookahead, sgd_nesterov_step, BnMode, DiffError, Graph, NodeId,
    Parameter, Tensor,
};
use crate::phantom::{Dataset, Label, PhantomScan, SplitIndex, SplitPart};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Positive class index = referable, everywhere in the crate.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("expected {expected} stage widths, got {got}")]
    WidthCount { expected: usize, got: usize },
    #[error("input channels must be 1 or 2, got {0}")]
    BadChannels(usize),
    #[error("training split has a single class; need both")]
    SingleClassTrainingSet,
    #[error("{part} split is empty")]
    EmptySplit { part: &'static str },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("both classes must be present to compute {metric}")]
    UndefinedMetric { metric: &'static str },
    #[error("length mismatch: {a} predictions vs {b} labels")]
    LengthMismatch { a: usize, b: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// Conv3x3 + batch norm (+ ReLU applied by the caller).
#[derive(Debug, Clone)]
struct ConvBnLayer {
    weight: Parameter,
    bias: Parameter,
    gamma: Parameter,
    beta: Parameter,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).unwrap()
}

fn conv_bn(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> ConvBnLayer {
    ConvBnLayer {
        weight: Parameter::new(
            format!("{name}.conv.weight"),
            he_normal(rng, &[cout, cin, 3, 3], cin * 9),
        ),
        bias: Parameter::new(format!("{name}.conv.bias"), Tensor::zeros(&[cout])),
        gamma: Parameter::new(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0)),
        beta: Parameter::new(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
        running_mean: vec![0.0; cout],
        running_var: vec![1.0; cout],
    }
}

pub const STAGES: usize = 5;
const CONVS_PER_STAGE: usize = 2;
const PARAMS_PER_LAYER: usize = 4;

/// Five conv stages separated by five max pools, one FC head to two logits.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    stages: Vec<Vec<ConvBnLayer>>,
    fc_weight: Parameter,
    fc_bias: Parameter,
}

/// Node handles from one forward pass.
pub struct ClassifierNodes {
    pub input: NodeId,
    pub logits: NodeId,
    /// Activation after the last conv stage, before the fifth pool (the
    /// class-activation-map tap).
    pub last_stage_act: NodeId,
    /// Pairs of (parameter index, leaf node) in [`ClassifierModel::params`]
    /// order.
    pub bindings: Vec<(usize, NodeId)>,
}

impl ClassifierModel {
    /// Builds the model with He-initialized conv weights and a zero-bias FC
    /// head. `widths` gives the channel count of each of the 5 stages.
    pub fn build(input_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() != STAGES {
            return Err(ClassifierError::WidthCount {
                expected: STAGES,
                got: widths.len(),
            });
        }
        if input_channels != 1 && input_channels != 2 {
            return Err(ClassifierError::BadChannels(input_channels));
        }
        let mut seed_bytes = [0u8; 32];
        seed_bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(b"clsbuild");
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = input_channels;
        for (si, &width) in widths.iter().enumerate() {
            let mut layers = Vec::with_capacity(CONVS_PER_STAGE);
            for li in 0..CONVS_PER_STAGE {
                layers.push(conv_bn(
                    &mut rng,
                    &format!("stage{si}.layer{li}"),
                    if li == 0 { cin } else { width },
                    width,
                ));
            }
            stages.push(layers);
            cin = width;
        }
        let fc_weight = Parameter::new("fc.weight", he_normal(&mut rng, &[2, cin], cin));
        let fc_bias = Parameter::new("fc.bias", Tensor::zeros(&[2]));
        Ok(ClassifierModel {
            input_channels,
            widths: widths.to_vec(),
            stages,
            fc_weight,
            fc_bias,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for l in stage {
                out.extend([&l.weight, &l.bias, &l.gamma, &l.beta]);
            }
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for l in stage {
                out.extend([&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta]);
            }
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Groups parameter indexes by position relative to the five pools:
    /// group k < 5 holds stage k (before pool k+1), group 5 holds everything
    /// after the last pool (the FC head). Disjoint and exhaustive.
    pub fn partition_parameters(&self) -> Vec<Vec<usize>> {
        let per_stage = CONVS_PER_STAGE * PARAMS_PER_LAYER;
        let mut groups: Vec<Vec<usize>> = (0..STAGES)
            .map(|s| (s * per_stage..(s + 1) * per_stage).collect())
            .collect();
        let fc_start = STAGES * per_stage;
        groups.push(vec![fc_start, fc_start + 1]);
        groups
    }

    /// Re-initializes the parameters of the given partition groups with fresh
    /// draws from the construction distribution (He for weights, constants
    /// for biases and batch-norm affine parameters). Running statistics are
    /// left as trained; they are not trainable parameters.
    pub fn reinitialize_groups(&mut self, groups: &[usize], seed: u64) {
        let mut seed_bytes = [0u8; 32];
        seed_bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(b"clsrernd");
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        for &gi in groups {
            if gi < STAGES {
                let widths = self.widths.clone();
                let input_channels = self.input_channels;
                for (li, layer) in self.stages[gi].iter_mut().enumerate() {
                    let cin = if li == 0 {
                        if gi == 0 {
                            input_channels
                        } else {
                            widths[gi - 1]
                        }
                    } else {
                        widths[gi]
                    };
                    let cout = widths[gi];
                    layer.weight.value = he_normal(&mut rng, &[cout, cin, 3, 3], cin * 9);
                    layer.bias.value.fill(0.0);
                    layer.gamma.value.fill(1.0);
                    layer.beta.value.fill(0.0);
                }
            } else {
                let cin = *self.widths.last().unwrap();
                self.fc_weight.value = he_normal(&mut rng, &[2, cin], cin);
                self.fc_bias.value.fill(0.0);
            }
        }
    }

    fn forward_impl(
        &self,
        g: &mut Graph<f32>,
        x: NodeId,
        mode: BnMode,
        running: Option<&mut Vec<Vec<(Vec<f32>, Vec<f32>)>>>,
    ) -> Result<ClassifierNodes> {
        let mut bindings = Vec::new();
        let mut param_idx = 0usize;
        let mut h = x;
        let mut last_stage_act = x;
        // In eval mode running stats are read-only; clone them locally so the
        // forward pass can take &self.
        let mut scratch: Vec<Vec<(Vec<f32>, Vec<f32>)>> = self
            .stages
            .iter()
            .map(|st| {
                st.iter()
                    .map(|l| (l.running_mean.clone(), l.running_var.clone()))
                    .collect()
            })
            .collect();
        for (si, stage) in self.stages.iter().enumerate() {
            for (li, layer) in stage.iter().enumerate() {
                let w = g.leaf(layer.weight.value.clone(), true);
                let b = g.leaf(layer.bias.value.clone(), true);
                let gamma = g.leaf(layer.gamma.value.clone(), true);
                let beta = g.leaf(layer.beta.value.clone(), true);
                bindings.extend([
                    (param_idx, w),
                    (param_idx + 1, b),
                    (param_idx + 2, gamma),
                    (param_idx + 3, beta),
                ]);
                param_idx += PARAMS_PER_LAYER;
                let conv = g.conv2d(h, w, Some(b), 1, 1)?;
                let (rm, rv) = &mut scratch[si][li];
                let bn = g.batch_norm2d(conv, gamma, beta, rm, rv, mode, BN_EPSILON, BN_MOMENTUM)?;
                h = g.relu(bn);
            }
            last_stage_act = h;
            h = g.max_pool2d(h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let fw = g.leaf(self.fc_weight.value.clone(), true);
        let fb = g.leaf(self.fc_bias.value.clone(), true);
        bindings.extend([(param_idx, fw), (param_idx + 1, fb)]);
        let logits = g.dense(pooled, fw, fb)?;
        if let Some(out) = running {
            *out = scratch;
        }
        Ok(ClassifierNodes {
            input: x,
            logits,
            last_stage_act,
            bindings,
        })
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph<f32>, x: NodeId) -> Result<ClassifierNodes> {
        let mut updated = Vec::new();
        let nodes = self.forward_impl(g, x, BnMode::Train, Some(&mut updated))?;
        for (stage, ups) in self.stages.iter_mut().zip(updated) {
            for (layer, (rm, rv)) in stage.iter_mut().zip(ups) {
                layer.running_mean = rm;
                layer.running_var = rv;
            }
        }
        Ok(nodes)
    }

    /// Eval-mode forward: frozen running statistics, no mutation; the model
    /// acts as a pure function of its input.
    pub fn forward_eval(&self, g: &mut Graph<f32>, x: NodeId) -> Result<ClassifierNodes> {
        self.forward_impl(g, x, BnMode::Eval, None)
    }

    pub fn accumulate_grads(&mut self, g: &Graph<f32>, bindings: &[(usize, NodeId)]) {
        let mut params = self.params_mut();
        for &(pi, node) in bindings {
            if let Some(grad) = g.grad(node) {
                for (a, &v) in params[pi].grad.data_mut().iter_mut().zip(grad.data()) {
                    *a += v;
                }
            }
        }
    }

    /// Named tensors of the whole model state (parameters + running stats).
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for (si, stage) in self.stages.iter().enumerate() {
            for (li, l) in stage.iter().enumerate() {
                out.push((
                    format!("stage{si}.layer{li}.bn.running_mean"),
                    vec![l.running_mean.len()],
                    l.running_mean.clone(),
                ));
                out.push((
                    format!("stage{si}.layer{li}.bn.running_var"),
                    vec![l.running_var.len()],
                    l.running_var.clone(),
                ));
            }
        }
        out
    }

    /// Restores parameter values and running stats from named tensors.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &(String, Vec<usize>, Vec<f32>)> =
            tensors.iter().map(|t| (t.0.as_str(), t)).collect();
        for p in self.params_mut() {
            let rec = by_name.get(p.name.as_str()).ok_or(DiffError::ShapeMismatch {
                op: "load_state",
                detail: format!("missing tensor '{}'", p.name),
            })?;
            if rec.1 != p.value.shape() {
                return Err(ClassifierError::Diff(DiffError::ShapeMismatch {
                    op: "load_state",
                    detail: format!("tensor '{}' shape {:?} vs {:?}", p.name, rec.1, p.value.shape()),
                }));
            }
            p.value = Tensor::from_vec(&rec.1, rec.2.clone()).map_err(ClassifierError::Diff)?;
        }
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (li, l) in stage.iter_mut().enumerate() {
                let rm = by_name
                    .get(format!("stage{si}.layer{li}.bn.running_mean").as_str())
                    .ok_or(DiffError::ShapeMismatch {
                        op: "load_state",
                        detail: "missing running_mean".into(),
                    })?;
                let rv = by_name
                    .get(format!("stage{si}.layer{li}.bn.running_var").as_str())
                    .ok_or(DiffError::ShapeMismatch {
                        op: "load_state",
                        detail: "missing running_var".into(),
                    })?;
                l.running_mean = rm.2.clone();
                l.running_var = rv.2.clone();
            }
        }
        Ok(())
    }
}

/// Stacks scans into a [N, C, H, W] batch; `channel` selects a single input
/// modality when the classifier was built with one channel.
pub fn batch_tensor(scans: &[&PhantomScan], channel: Option<usize>) -> Tensor<f32> {
    let (h, w) = (scans[0].height(), scans[0].width());
    let c = if channel.is_some() { 1 } else { 2 };
    let mut data = Vec::with_capacity(scans.len() * c * h * w);
    for s in scans {
        match channel {
            Some(ci) => data.extend_from_slice(&s.image.data()[ci * h * w..(ci + 1) * h * w]),
            None => data.extend_from_slice(s.image.data()),
        }
    }
    Tensor::from_vec(&[scans.len(), c, h, w], data).expect("scan planes share dimensions")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Single input modality (channel index) for 1-channel models.
    pub channel: Option<usize>,
    /// Optional early stop once training accuracy reaches this level
    /// (used by the label-randomization check).
    pub stop_at_train_accuracy: Option<f64>,
    /// Std of Gaussian pixel noise added to training batches. Hardens the
    /// decision boundary against small perturbations so generators must edit
    /// actual features rather than inject adversarial noise.
    pub noise_std: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 3,
            learning_rate: 5e-4,
            momentum: 0.9,
            seed: 1,
            channel: None,
            stop_at_train_accuracy: None,
            noise_std: 0.04,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn shuffled(indexes: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = indexes.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Trains with softmax cross-entropy and Nesterov momentum; keeps the epoch
/// snapshot with the best validation accuracy (ties -> earliest epoch).
/// `labels` overrides the dataset labels when given (label-randomization
/// check); it is indexed by scan position.
pub fn train_classifier(
    model: &mut ClassifierModel,
    dataset: &Dataset,
    split: &SplitIndex,
    cfg: &TrainConfig,
    labels: Option<&[usize]>,
) -> Result<TrainHistory> {
    let train_idx = split.scan_indexes(dataset, SplitPart::Train);
    let val_idx = split.scan_indexes(dataset, SplitPart::Validation);
    if train_idx.is_empty() {
        return Err(ClassifierError::EmptySplit { part: "train" });
    }
    if val_idx.is_empty() {
        return Err(ClassifierError::EmptySplit { part: "validation" });
    }
    let label_of = |i: usize| -> usize {
        labels
            .map(|l| l[i])
            .unwrap_or_else(|| dataset.scans[i].label.index())
    };
    let classes: std::collections::BTreeSet<usize> = train_idx.iter().map(|&i| label_of(i)).collect();
    if classes.len() < 2 {
        return Err(ClassifierError::SingleClassTrainingSet);
    }

    let mut history = TrainHistory::default();
    // (accuracy, loss, epoch, snapshot); ties on accuracy break to lower loss,
    // then to the earlier epoch.
    let mut best: Option<(f64, f64, usize, Vec<(String, Vec<usize>, Vec<f32>)>)> = None;

    let mut seed_bytes = [0u8; 32];
    seed_bytes[0..8].copy_from_slice(&cfg.seed.to_le_bytes());
    seed_bytes[8..16].copy_from_slice(b"clstrain");
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);

    for epoch in 0..cfg.epochs {
        let order = shuffled(&train_idx, &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scans: Vec<&PhantomScan> = chunk.iter().map(|&i| &dataset.scans[i]).collect();
            let mut x = batch_tensor(&scans, cfg.channel);
            if cfg.noise_std > 0.0 {
                let noise = Normal::new(0.0, cfg.noise_std as f64).unwrap();
                for v in x.data_mut() {
                    *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| label_of(i)).collect();

            let mut params = model.params_mut();
            apply_lookahead(&mut params, cfg.momentum);
            drop(params);

            let mut g = Graph::new();
            let xin = g.leaf(x, false);
            let nodes = model.forward_train(&mut g, xin)?;
            let loss = g.softmax_cross_entropy(nodes.logits, &targets)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch, step });
            }
            g.backward(loss, None)?;
            model.accumulate_grads(&g, &nodes.bindings);

            let logits = g.value(nodes.logits);
            for (bi, &t) in targets.iter().enumerate() {
                let row = &logits.data()[bi * 2..bi * 2 + 2];
                let pred = if row[1] > row[0] { 1 } else { 0 };
                if pred == t {
                    correct += 1;
                }
            }
            epoch_loss += loss_val as f64 * chunk.len() as f64;

            let mut params = model.params_mut();
            remove_lookahead(&mut params, cfg.momentum);
            sgd_nesterov_step(&mut params, cfg.learning_rate, cfg.momentum)?;
        }
        let train_acc = correct as f64 / train_idx.len() as f64;
        history.train_loss.push(epoch_loss / train_idx.len() as f64);
        history.train_accuracy.push(train_acc);

        let (val_loss, val_acc) = evaluate(model, dataset, &val_idx, cfg.channel, labels)?;
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        let is_better = match &best {
            None => true,
            Some((acc, loss, _, _)) => {
                val_acc > *acc || (val_acc == *acc && val_loss < *loss)
            }
        };
        if is_better {
            best = Some((val_acc, val_loss, epoch, model.state_tensors()));
        }

        if let Some(stop) = cfg.stop_at_train_accuracy {
            if train_acc >= stop {
                break;
            }
        }
    }

    if let Some((_, _, epoch, state)) = best {
        model.load_state_tensors(&state)?;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

/// Mean loss and accuracy over the given scan indexes (eval mode).
pub fn evaluate(
    model: &ClassifierModel,
    dataset: &Dataset,
    indexes: &[usize],
    channel: Option<usize>,
    labels: Option<&[usize]>,
) -> Result<(f64, f64)> {
    if indexes.is_empty() {
        return Err(ClassifierError::EmptySplit { part: "evaluation" });
    }
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    for chunk in indexes.chunks(16) {
        let scans: Vec<&PhantomScan> = chunk.iter().map(|&i| &dataset.scans[i]).collect();
        let targets: Vec<usize> = chunk
            .iter()
            .map(|&i| labels.map(|l| l[i]).unwrap_or_else(|| dataset.scans[i].label.index()))
            .collect();
        let mut g = Graph::new();
        let xin = g.leaf(batch_tensor(&scans, channel), false);
        let nodes = model.forward_eval(&mut g, xin)?;
        let loss = g.softmax_cross_entropy(nodes.logits, &targets)?;
        total_loss += g.value(loss).item() as f64 * chunk.len() as f64;
        let logits = g.value(nodes.logits);
        for (bi, &t) in targets.iter().enumerate() {
            let row = &logits.data()[bi * 2..bi * 2 + 2];
            if (if row[1] > row[0] { 1 } else { 0 }) == t {
                correct += 1;
            }
        }
    }
    Ok((
        total_loss / indexes.len() as f64,
        correct as f64 / indexes.len() as f64,
    ))
}

/// Softmax probabilities and argmax labels for a set of scans (eval mode).
pub fn predict(
    model: &ClassifierModel,
    scans: &[&PhantomScan],
    channel: Option<usize>,
) -> Result<(Vec<[f32; 2]>, Vec<Label>)> {
    let mut probs = Vec::with_capacity(scans.len());
    let mut labels = Vec::with_capacity(scans.len());
    for chunk in scans.chunks(16) {
        let mut g = Graph::new();
        let xin = g.leaf(batch_tensor(chunk, channel), false);
        let nodes = model.forward_eval(&mut g, xin)?;
        let logits = g.value(nodes.logits).clone();
        let p = crate::diffcore::kernels::softmax_rows(&logits);
        for bi in 0..chunk.len() {
            let row = [p.data()[bi * 2], p.data()[bi * 2 + 1]];
            probs.push(row);
            labels.push(Label::from_index(if row[1] > row[0] { 1 } else { 0 }));
        }
    }
    Ok((probs, labels))
}

/// Area under the ROC curve, Mann-Whitney formulation; ties count one half.
pub fn compute_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch {
            a: scores.len(),
            b: labels.len(),
        });
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(ClassifierError::UndefinedMetric { metric: "AUC" });
    }
    let mut acc = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(acc / (pos.len() as f64 * neg.len() as f64))
}

/// Quadratic-weighted Cohen's kappa (equals plain kappa for two classes).
pub fn compute_qw_kappa(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(ClassifierError::LengthMismatch {
            a: pred.len(),
            b: truth.len(),
        });
    }
    let k = truth
        .iter()
        .chain(pred.iter())
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0)
        .max(2);
    let truth_classes: std::collections::BTreeSet<usize> = truth.iter().copied().collect();
    if truth_classes.len() < 2 {
        return Err(ClassifierError::UndefinedMetric { metric: "kappa" });
    }
    let n = pred.len() as f64;
    let mut observed = vec![0.0f64; k * k];
    let mut truth_marginal = vec![0.0f64; k];
    let mut pred_marginal = vec![0.0f64; k];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * k + p] += 1.0;
        truth_marginal[t] += 1.0;
        pred_marginal[p] += 1.0;
    }
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((k - 1) as f64 * (k - 1) as f64)
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            num += weight(i, j) * observed[i * k + j];
            den += weight(i, j) * truth_marginal[i] * pred_marginal[j] / n;
        }
    }
    if den == 0.0 {
        // Degenerate marginals: perfect chance agreement structure.
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, DatasetConfig};

    fn tiny_dataset() -> (Dataset, SplitIndex) {
        let cfg = DatasetConfig {
            non_referable: 6,
            referable: 8,
            height: 32,
            width: 32,
            master_seed: 3,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let split = crate::phantom::split_by_subject(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        (ds, split)
    }

    #[test]
    fn build_accepts_two_channel_scans_and_pools_to_2x2() {
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 64, 64]), false);
        let nodes = model.forward_eval(&mut g, x).unwrap();
        assert_eq!(g.value(nodes.logits).shape(), &[1, 2]);
        // 64 / 2^5 = 2: the last stage activation is pooled once more after
        // its tap, so its spatial size is 4x4 before the fifth pool.
        assert_eq!(g.value(nodes.last_stage_act).shape()[2], 4);

        assert!(ClassifierModel::build(3, &[4; 5], 0).is_err());
        assert!(ClassifierModel::build(2, &[4; 4], 0).is_err());
        // single-modality variant accepts one channel
        let m1 = ClassifierModel::build(1, &[4, 4, 8, 8, 8], 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 32, 32]), false);
        assert!(m1.forward_eval(&mut g, x).is_ok());
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let model = ClassifierModel::build(2, &[4, 8, 8, 16, 16], 0).unwrap();
        let groups = model.partition_parameters();
        assert_eq!(groups.len(), 6);
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            for &i in g {
                assert!(seen.insert(i), "parameter {i} in two groups");
            }
        }
        assert_eq!(seen.len(), model.params().len());
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 9).unwrap();
        let one: Vec<f32> = (0..2 * 32 * 32).map(|i| (i % 50) as f32 / 50.0).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let x = Tensor::from_vec(&[2, 2, 32, 32], two).unwrap();
        let run = |m: &ClassifierModel| {
            let mut g = Graph::new();
            let xin = g.leaf(x.clone(), false);
            let nodes = m.forward_eval(&mut g, xin).unwrap();
            g.value(nodes.logits).data().to_vec()
        };
        let a = run(&model);
        let b = run(&model);
        assert_eq!(a, b);
        // duplicate rows in one batch give identical outputs
        assert_eq!(a[0..2], a[2..4]);
    }

    #[test]
    fn predict_probabilities_sum_to_one() {
        let cfg = DatasetConfig {
            non_referable: 3,
            referable: 3,
            height: 32,
            width: 32,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 2).unwrap();
        let scans: Vec<&PhantomScan> = ds.scans.iter().collect();
        let (probs, labels) = predict(&model, &scans, None).unwrap();
        assert_eq!(labels.len(), ds.len());
        for p in probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model_with_empty_history() {
        let (ds, split) = tiny_dataset();
        let mut model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 5).unwrap();
        let before = model.state_tensors();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let hist = train_classifier(&mut model, &ds, &split, &cfg, None).unwrap();
        assert!(hist.train_loss.is_empty());
        assert!(hist.best_epoch.is_none());
        assert_eq!(model.state_tensors(), before);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (ds, split) = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 5).unwrap();
            train_classifier(&mut model, &ds, &split, &cfg, None).unwrap();
            model.state_tensors()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let (ds, split) = tiny_dataset();
        let mut model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 5).unwrap();
        let all_pos = vec![1usize; ds.len()];
        let err = train_classifier(&mut model, &ds, &split, &TrainConfig::default(), Some(&all_pos));
        assert!(matches!(err, Err(ClassifierError::SingleClassTrainingSet)));
    }

    #[test]
    fn auc_hand_values() {
        assert_eq!(compute_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        let auc = compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        assert!(compute_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let scores = [0.11, 0.52, 0.48, 0.7, 0.31, 0.9];
        let labels = [0, 1, 0, 1, 0, 1];
        let a = compute_auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(a, compute_auc(&exp, &labels).unwrap());
    }

    #[test]
    fn kappa_hand_values() {
        // perfect agreement
        assert_eq!(compute_qw_kappa(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap(), 1.0);
        // TP=40 TN=40 FP=10 FN=10 -> kappa 0.6
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..40 {
            pred.push(1);
            truth.push(1);
        }
        for _ in 0..40 {
            pred.push(0);
            truth.push(0);
        }
        for _ in 0..10 {
            pred.push(1);
            truth.push(0);
        }
        for _ in 0..10 {
            pred.push(0);
            truth.push(1);
        }
        let k = compute_qw_kappa(&pred, &truth).unwrap();
        assert!((k - 0.6).abs() < 1e-12);
        // constant predictions against balanced truth -> 0
        let k0 = compute_qw_kappa(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!(k0.abs() < 1e-12);
        assert!(compute_qw_kappa(&[0, 1], &[1, 1, 0]).is_err());
    }
}
