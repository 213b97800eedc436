//! Dual-generator adversarial training against a frozen classifier, and the
//! per-channel activation maps extracted from the trained main generator.
//!
//! The main generator learns to turn positively classified scans into scans
//! the classifier calls negative; the assistant learns the inverse. Each
//! training step draws one batch of each predicted class, evaluates
//!
//! ```text
//! L- = H-(F(G-(x+)), y-) + M-(G-(x-), x-) + Lc
//! L+ = H+(F(G+(x-)), y+) + M+(G+(x+), x+) + Lc
//! Lc = mean|x- - G-(G+(x-))| + mean|x+ - G+(G-(x+))|
//! ```
//!
//! and applies one Nesterov step to each generator from its own loss. The
//! classifier is used in eval mode and never modified. Model selection keeps
//! the main-generator snapshot with the lowest validation L-.

pub mod maps;

pub use maps::{compute_bam_abs, compute_bam_signed, default_sigma, BamPair};

use crate::classifier::{predict, ClassifierError, ClassifierModel, POSITIVE_CLASS};
use crate::diffcore::{
    apply_lookahead, remove_lookahead, sgd_nesterov_step, DiffError, Graph, NodeId, Tensor,
};
use crate::generator::GeneratorModel;
use crate::phantom::{Dataset, Label, PhantomScan, SplitIndex, SplitPart};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BamError {
    #[error("degenerate classifier: every {part} scan predicted {class:?}; generator training needs both predicted classes")]
    DegenerateClassifier { part: &'static str, class: Label },
    #[error("empty batch for predicted class {0:?}")]
    EmptyBatch(Label),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("model selection needs a non-empty validation history")]
    EmptyHistory,
    #[error("loss configuration: {0}")]
    BadLossConfig(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, BamError>;

/// Loss-term toggles for the ablation variants. The cross-entropy terms are
/// always on; the cycle term requires the assistant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub preserved: bool,
    pub cycle: bool,
    pub assistant: bool,
}

impl LossToggles {
    pub fn full() -> Self {
        LossToggles {
            preserved: true,
            cycle: true,
            assistant: true,
        }
    }

    /// H terms only, no assistant.
    pub fn h_only() -> Self {
        LossToggles {
            preserved: false,
            cycle: false,
            assistant: false,
        }
    }

    /// H terms plus the cycle loss.
    pub fn h_cycle() -> Self {
        LossToggles {
            preserved: false,
            cycle: true,
            assistant: true,
        }
    }

    /// H terms plus the preserved-data term, no assistant.
    pub fn h_preserved() -> Self {
        LossToggles {
            preserved: true,
            cycle: false,
            assistant: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle && !self.assistant {
            return Err(BamError::BadLossConfig(
                "the cycle term needs the assistant generator".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BamConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Gaussian filter width for map extraction; `None` means H/32.
    pub sigma: Option<f64>,
    pub seed: u64,
    pub loss: LossToggles,
    /// Single input modality (channel index) for 1-channel classifiers.
    pub channel: Option<usize>,
}

impl Default for BamConfig {
    fn default() -> Self {
        BamConfig {
            widths: vec![16, 32, 64],
            epochs: 500,
            batch_size: 3,
            learning_rate: 5e-4,
            momentum: 0.9,
            sigma: None,
            seed: 1,
            loss: LossToggles::full(),
            channel: None,
        }
    }
}

/// Splits scan indexes by the classifier's *prediction* (not ground truth).
/// Errors when either side is empty, mirroring the degenerate-model failure
/// mode where no maps can be trained at all.
pub fn partition_by_prediction(
    classifier: &ClassifierModel,
    dataset: &Dataset,
    indexes: &[usize],
    channel: Option<usize>,
    part: &'static str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let scans: Vec<&PhantomScan> = indexes.iter().map(|&i| &dataset.scans[i]).collect();
    let (_, labels) = predict(classifier, &scans, channel)?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (&i, l) in indexes.iter().zip(&labels) {
        if l.index() == POSITIVE_CLASS {
            plus.push(i);
        } else {
            minus.push(i);
        }
    }
    if plus.is_empty() {
        return Err(BamError::DegenerateClassifier {
            part,
            class: Label::NonReferable,
        });
    }
    if minus.is_empty() {
        return Err(BamError::DegenerateClassifier {
            part,
            class: Label::Referable,
        });
    }
    Ok((plus, minus))
}

/// The six named loss components of Eq-style training. `cycle` is shared
/// between the two totals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossComponents {
    pub h_minus: f64,
    pub m_minus: f64,
    pub h_plus: f64,
    pub m_plus: f64,
    pub cycle: f64,
}

impl LossComponents {
    pub fn l_minus(&self) -> f64 {
        self.h_minus + self.m_minus + self.cycle
    }

    pub fn l_plus(&self) -> f64 {
        self.h_plus + self.m_plus + self.cycle
    }
}

/// Cycle-consistency value from raw tensors: per-pixel mean absolute error of
/// each cycled batch against its original, summed over the two directions.
pub fn cycle_loss_value(
    x_minus: &Tensor<f32>,
    cycled_minus: &Tensor<f32>,
    x_plus: &Tensor<f32>,
    cycled_plus: &Tensor<f32>,
) -> f64 {
    let mean_abs = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() as f64)
            .sum();
        s / a.numel() as f64
    };
    mean_abs(x_minus, cycled_minus) + mean_abs(x_plus, cycled_plus)
}

/// Cycle loss of two generators over explicit batches (eval mode).
pub fn cycle_loss(
    g_minus: &GeneratorModel,
    g_plus: &GeneratorModel,
    batch_minus: &Tensor<f32>,
    batch_plus: &Tensor<f32>,
) -> Result<f64> {
    if batch_minus.shape()[0] == 0 {
        return Err(BamError::EmptyBatch(Label::NonReferable));
    }
    if batch_plus.shape()[0] == 0 {
        return Err(BamError::EmptyBatch(Label::Referable));
    }
    let mut g = Graph::new();
    let xm = g.leaf(batch_minus.clone(), false);
    let xp = g.leaf(batch_plus.clone(), false);
    let fm = g_plus.forward_eval(&mut g, xm)?;
    let cm = g_minus.forward_eval(&mut g, fm.output)?;
    let fp = g_minus.forward_eval(&mut g, xp)?;
    let cp = g_plus.forward_eval(&mut g, fp.output)?;
    Ok(cycle_loss_value(
        batch_minus,
        g.value(cm.output),
        batch_plus,
        g.value(cp.output),
    ))
}

/// Both generator losses and their named components over explicit batches,
/// classifier frozen, everything in eval mode.
pub fn generator_losses(
    classifier: &ClassifierModel,
    g_minus: &GeneratorModel,
    g_plus: &GeneratorModel,
    batch_plus: &Tensor<f32>,
    batch_minus: &Tensor<f32>,
) -> Result<(f64, f64, LossComponents)> {
    if batch_minus.shape()[0] == 0 {
        return Err(BamError::EmptyBatch(Label::NonReferable));
    }
    if batch_plus.shape()[0] == 0 {
        return Err(BamError::EmptyBatch(Label::Referable));
    }
    let mut g = Graph::new();
    let xp = g.leaf(batch_plus.clone(), false);
    let xm = g.leaf(batch_minus.clone(), false);

    let forged_minus = g_minus.forward_eval(&mut g, xp)?; // G-(x+)
    let forged_plus = g_plus.forward_eval(&mut g, xm)?; // G+(x-)
    let preserved_minus = g_minus.forward_eval(&mut g, xm)?; // G-(x-)
    let preserved_plus = g_plus.forward_eval(&mut g, xp)?; // G+(x+)
    let cycled_minus = g_minus.forward_eval(&mut g, forged_plus.output)?; // G-(G+(x-))
    let cycled_plus = g_plus.forward_eval(&mut g, forged_minus.output)?; // G+(G-(x+))

    let fm = classifier.forward_eval(&mut g, forged_minus.output)?;
    let fp = classifier.forward_eval(&mut g, forged_plus.output)?;
    let n_plus = batch_plus.shape()[0];
    let n_minus = batch_minus.shape()[0];
    let hm = g.softmax_cross_entropy(fm.logits, &vec![1 - POSITIVE_CLASS; n_plus])?;
    let hp = g.softmax_cross_entropy(fp.logits, &vec![POSITIVE_CLASS; n_minus])?;
    let mm = g.mean_abs_error(preserved_minus.output, xm)?;
    let mp = g.mean_abs_error(preserved_plus.output, xp)?;

    let cycle = cycle_loss_value(
        batch_minus,
        g.value(cycled_minus.output),
        batch_plus,
        g.value(cycled_plus.output),
    );
    let comps = LossComponents {
        h_minus: g.value(hm).item() as f64,
        m_minus: g.value(mm).item() as f64,
        h_plus: g.value(hp).item() as f64,
        m_plus: g.value(mp).item() as f64,
        cycle,
    };
    Ok((comps.l_minus(), comps.l_plus(), comps))
}

/// Snapshot of the main generator at its best validation epoch.
#[derive(Debug, Clone)]
struct BestSnapshot {
    epoch: usize,
    loss: f64,
    state: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Result of one training run: both generators at their final state, the
/// validation L- history, and the best-epoch snapshot of the main generator.
pub struct BamTrainState {
    pub main: GeneratorModel,
    pub assistant: Option<GeneratorModel>,
    pub val_l_minus: Vec<f64>,
    pub config: BamConfig,
    best: Option<BestSnapshot>,
}

impl BamTrainState {
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }
}

/// Returns the main-generator snapshot at the epoch of minimum validation
/// L-, ties resolved to the earliest epoch.
pub fn select_best(state: &BamTrainState) -> Result<GeneratorModel> {
    let best = state.best.as_ref().ok_or(BamError::EmptyHistory)?;
    let mut model = state.main.clone();
    model.load_state_tensors(&best.state)?;
    Ok(model)
}

fn epoch_rng(seed: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(tag);
    ChaCha8Rng::from_seed(bytes)
}

fn shuffled(indexes: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = indexes.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn gather_batch(
    dataset: &Dataset,
    order: &[usize],
    start: usize,
    size: usize,
    channel: Option<usize>,
) -> Tensor<f32> {
    let scans: Vec<&PhantomScan> = (0..size)
        .map(|k| &dataset.scans[order[(start + k) % order.len()]])
        .collect();
    crate::classifier::batch_tensor(&scans, channel)
}

/// Validation L- of the current generator pair (eval mode, chunked over the
/// validation partition, each term weighted to a full-set mean).
fn validation_l_minus(
    classifier: &ClassifierModel,
    main: &GeneratorModel,
    assistant: Option<&GeneratorModel>,
    dataset: &Dataset,
    val_plus: &[usize],
    val_minus: &[usize],
    loss: LossToggles,
    channel: Option<usize>,
) -> Result<f64> {
    const CHUNK: usize = 8;
    // H-: cross-entropy of forged positives against the negative label
    let mut h_sum = 0.0f64;
    for chunk in val_plus.chunks(CHUNK) {
        let x = gather_batch(dataset, chunk, 0, chunk.len(), channel);
        let mut g = Graph::new();
        let xp = g.leaf(x, false);
        let forged = main.forward_eval(&mut g, xp)?;
        let f = classifier.forward_eval(&mut g, forged.output)?;
        let ce = g.softmax_cross_entropy(f.logits, &vec![1 - POSITIVE_CLASS; chunk.len()])?;
        h_sum += g.value(ce).item() as f64 * chunk.len() as f64;
    }
    let mut total = h_sum / val_plus.len() as f64;

    if loss.preserved {
        let mut abs_sum = 0.0f64;
        let mut px = 0usize;
        for chunk in val_minus.chunks(CHUNK) {
            let x = gather_batch(dataset, chunk, 0, chunk.len(), channel);
            let mut g = Graph::new();
            let xm = g.leaf(x.clone(), false);
            let pres = main.forward_eval(&mut g, xm)?;
            abs_sum += g
                .value(pres.output)
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum::<f64>();
            px += x.numel();
        }
        total += abs_sum / px as f64;
    }

    if loss.cycle {
        let assistant = assistant.expect("cycle term requires the assistant");
        let mut abs_m = 0.0f64;
        let mut px_m = 0usize;
        for chunk in val_minus.chunks(CHUNK) {
            let x = gather_batch(dataset, chunk, 0, chunk.len(), channel);
            let mut g = Graph::new();
            let xm = g.leaf(x.clone(), false);
            let forged = assistant.forward_eval(&mut g, xm)?;
            let cycled = main.forward_eval(&mut g, forged.output)?;
            abs_m += g
                .value(cycled.output)
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum::<f64>();
            px_m += x.numel();
        }
        let mut abs_p = 0.0f64;
        let mut px_p = 0usize;
        for chunk in val_plus.chunks(CHUNK) {
            let x = gather_batch(dataset, chunk, 0, chunk.len(), channel);
            let mut g = Graph::new();
            let xp = g.leaf(x.clone(), false);
            let forged = main.forward_eval(&mut g, xp)?;
            let cycled = assistant.forward_eval(&mut g, forged.output)?;
            abs_p += g
                .value(cycled.output)
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum::<f64>();
            px_p += x.numel();
        }
        total += abs_m / px_m as f64 + abs_p / px_p as f64;
    }
    Ok(total)
}

/// Trains the generator pair against a frozen classifier. Deterministic
/// given the config seed; the classifier is never modified.
pub fn train_bam(
    classifier: &ClassifierModel,
    dataset: &Dataset,
    split: &SplitIndex,
    config: &BamConfig,
) -> Result<BamTrainState> {
    config.loss.validate()?;
    let channel = config.channel;
    let train_idx = split.scan_indexes(dataset, SplitPart::Train);
    let val_idx = split.scan_indexes(dataset, SplitPart::Validation);
    let (train_plus, train_minus) =
        partition_by_prediction(classifier, dataset, &train_idx, channel, "training")?;
    let (val_plus, val_minus) =
        partition_by_prediction(classifier, dataset, &val_idx, channel, "validation")?;

    let in_channels = classifier.input_channels;
    let mut main = GeneratorModel::build(in_channels, &config.widths, config.seed)?;
    let mut assistant = if config.loss.assistant {
        Some(GeneratorModel::build(
            in_channels,
            &config.widths,
            config.seed ^ 0x9e37_79b9_7f4a_7c15,
        )?)
    } else {
        None
    };

    let uses_minus = config.loss.assistant || config.loss.preserved || config.loss.cycle;
    let mut rng = epoch_rng(config.seed, b"bamtrain");
    let mut val_history = Vec::with_capacity(config.epochs);
    let mut best: Option<BestSnapshot> = None;

    for epoch in 0..config.epochs {
        let plus_order = shuffled(&train_plus, &mut rng);
        let minus_order = shuffled(&train_minus, &mut rng);
        let per_epoch = if uses_minus {
            train_plus.len().max(train_minus.len())
        } else {
            train_plus.len()
        };
        let steps = per_epoch.div_ceil(config.batch_size);

        for step in 0..steps {
            let start = step * config.batch_size;
            let xp = gather_batch(dataset, &plus_order, start, config.batch_size, channel);
            let xm = gather_batch(dataset, &minus_order, start, config.batch_size, channel);

            apply_lookahead(&mut main.params_mut(), config.momentum);
            if let Some(a) = assistant.as_mut() {
                apply_lookahead(&mut a.params_mut(), config.momentum);
            }

            let mut g = Graph::new();
            let xp_n = g.leaf(xp, false);
            let xm_n = g.leaf(xm, false);

            // Every forward pass binds its own parameter leaves; gradients
            // must be gathered from all passes of a model.
            let mut main_passes = Vec::new();
            let mut assistant_passes = Vec::new();

            // forged data and its classification terms
            let forged_minus = main.forward_train(&mut g, xp_n)?;
            let f_minus = classifier.forward_eval(&mut g, forged_minus.output)?;
            let h_minus = g.softmax_cross_entropy(
                f_minus.logits,
                &vec![1 - POSITIVE_CLASS; config.batch_size],
            )?;

            let mut l_minus_terms = vec![h_minus];
            let mut l_plus_terms = Vec::new();

            let forged_minus_out = forged_minus.output;
            main_passes.push(forged_minus);

            if config.loss.preserved {
                let preserved_minus = main.forward_train(&mut g, xm_n)?;
                let m_minus = g.mean_abs_error(preserved_minus.output, xm_n)?;
                l_minus_terms.push(m_minus);
                main_passes.push(preserved_minus);
            }

            if let Some(a) = assistant.as_mut() {
                let forged_plus = a.forward_train(&mut g, xm_n)?;
                let f_plus = classifier.forward_eval(&mut g, forged_plus.output)?;
                let h_plus = g.softmax_cross_entropy(
                    f_plus.logits,
                    &vec![POSITIVE_CLASS; config.batch_size],
                )?;
                l_plus_terms.push(h_plus);

                if config.loss.preserved {
                    let preserved_plus = a.forward_train(&mut g, xp_n)?;
                    let m_plus = g.mean_abs_error(preserved_plus.output, xp_n)?;
                    l_plus_terms.push(m_plus);
                    assistant_passes.push(preserved_plus);
                }
                if config.loss.cycle {
                    let cycled_minus = main.forward_train(&mut g, forged_plus.output)?;
                    let cm = g.mean_abs_error(cycled_minus.output, xm_n)?;
                    let cycled_plus = a.forward_train(&mut g, forged_minus_out)?;
                    let cp = g.mean_abs_error(cycled_plus.output, xp_n)?;
                    let cycle = g.sum_scalars(&[cm, cp])?;
                    l_minus_terms.push(cycle);
                    l_plus_terms.push(cycle);
                    main_passes.push(cycled_minus);
                    assistant_passes.push(cycled_plus);
                }
                assistant_passes.push(forged_plus);
            }

            let l_minus = g.sum_scalars(&l_minus_terms)?;
            if !g.value(l_minus).item().is_finite() {
                return Err(BamError::NonFiniteLoss { epoch, step });
            }
            // Each backward pass only feeds one optimizer; skip the weight
            // gradients of the other model (its activations still propagate).
            for pass in &assistant_passes {
                for &(_, node) in &pass.bindings {
                    g.set_needs_grad(node, false);
                }
            }
            g.backward(l_minus, None)?;
            for pass in &main_passes {
                main.accumulate_grads(&g, &pass.bindings);
            }

            if let Some(a) = assistant.as_mut() {
                let l_plus = g.sum_scalars(&l_plus_terms)?;
                if !g.value(l_plus).item().is_finite() {
                    return Err(BamError::NonFiniteLoss { epoch, step });
                }
                g.zero_grads();
                for pass in &assistant_passes {
                    for &(_, node) in &pass.bindings {
                        g.set_needs_grad(node, true);
                    }
                }
                for pass in &main_passes {
                    for &(_, node) in &pass.bindings {
                        g.set_needs_grad(node, false);
                    }
                }
                g.backward(l_plus, None)?;
                for pass in &assistant_passes {
                    a.accumulate_grads(&g, &pass.bindings);
                }
            }

            remove_lookahead(&mut main.params_mut(), config.momentum);
            sgd_nesterov_step(&mut main.params_mut(), config.learning_rate, config.momentum)?;
            if let Some(a) = assistant.as_mut() {
                remove_lookahead(&mut a.params_mut(), config.momentum);
                sgd_nesterov_step(&mut a.params_mut(), config.learning_rate, config.momentum)?;
            }
        }

        let val = validation_l_minus(
            classifier,
            &main,
            assistant.as_ref(),
            dataset,
            &val_plus,
            &val_minus,
            config.loss,
            channel,
        )?;
        val_history.push(val);
        let better = match &best {
            None => true,
            Some(b) => val < b.loss,
        };
        if better {
            best = Some(BestSnapshot {
                epoch,
                loss: val,
                state: main.state_tensors(),
            });
        }
    }

    Ok(BamTrainState {
        main,
        assistant,
        val_l_minus: val_history,
        config: config.clone(),
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, split_by_subject, DatasetConfig};

    fn tiny_setup() -> (Dataset, SplitIndex, ClassifierModel) {
        let cfg = DatasetConfig {
            non_referable: 8,
            referable: 10,
            height: 32,
            width: 32,
            master_seed: 21,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let split = split_by_subject(&ds, (0.6, 0.2, 0.2), 2).unwrap();
        let classifier = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 17).unwrap();
        (ds, split, classifier)
    }

    #[test]
    fn partition_sizes_sum_and_degenerate_detection() {
        let (ds, split, classifier) = tiny_setup();
        let idx = split.scan_indexes(&ds, SplitPart::Train);
        match partition_by_prediction(&classifier, &ds, &idx, None, "training") {
            Ok((plus, minus)) => {
                assert_eq!(plus.len() + minus.len(), idx.len());
                assert!(!plus.is_empty() && !minus.is_empty());
            }
            Err(BamError::DegenerateClassifier { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
        // A classifier with an overwhelming positive bias predicts one class.
        let mut biased = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 17).unwrap();
        let n = biased.params().len();
        {
            let mut params = biased.params_mut();
            let fc_bias = &mut params[n - 1];
            fc_bias.value.data_mut()[1] = 100.0;
        }
        let err = partition_by_prediction(&biased, &ds, &idx, None, "training");
        assert!(matches!(err, Err(BamError::DegenerateClassifier { .. })));
    }

    #[test]
    fn cycle_loss_zero_for_identity_generators_and_hand_value() {
        let (ds, _, _) = tiny_setup();
        let g_minus = GeneratorModel::build(2, &[4, 8, 8], 1).unwrap();
        let g_plus = GeneratorModel::build(2, &[4, 8, 8], 2).unwrap();
        let scans: Vec<&PhantomScan> = ds.scans.iter().take(2).collect();
        let batch = crate::classifier::batch_tensor(&scans, None);
        // zero-init generators are identities, so both cycles return inputs
        let lc = cycle_loss(&g_minus, &g_plus, &batch, &batch).unwrap();
        assert_eq!(lc, 0.0);

        // single-pixel oracle: x-=0.2 cycled to 0.5, x+=0.8 cycled to 0.6
        let xm = Tensor::from_vec(&[1, 1, 1, 1], vec![0.2]).unwrap();
        let cm = Tensor::from_vec(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let xp = Tensor::from_vec(&[1, 1, 1, 1], vec![0.8]).unwrap();
        let cp = Tensor::from_vec(&[1, 1, 1, 1], vec![0.6]).unwrap();
        let v = cycle_loss_value(&xm, &cm, &xp, &cp);
        assert!((v - 0.5).abs() < 1e-6);
    }

    #[test]
    fn identity_generators_reduce_losses_to_the_h_terms() {
        let (ds, split, classifier) = tiny_setup();
        let idx = split.scan_indexes(&ds, SplitPart::Train);
        let g_minus = GeneratorModel::build(2, &[4, 8, 8], 1).unwrap();
        let g_plus = GeneratorModel::build(2, &[4, 8, 8], 2).unwrap();
        let scans: Vec<&PhantomScan> = idx.iter().map(|&i| &ds.scans[i]).collect();
        let batch = crate::classifier::batch_tensor(&scans[..3], None);
        let (l_minus, l_plus, c) =
            generator_losses(&classifier, &g_minus, &g_plus, &batch, &batch).unwrap();
        assert_eq!(c.m_minus, 0.0);
        assert_eq!(c.m_plus, 0.0);
        assert_eq!(c.cycle, 0.0);
        assert!(c.h_minus > 0.0 && c.h_plus > 0.0);
        // component-sum identity
        assert!((l_minus - (c.h_minus + c.m_minus + c.cycle)).abs() < 1e-6);
        assert!((l_plus - (c.h_plus + c.m_plus + c.cycle)).abs() < 1e-6);
    }

    #[test]
    fn select_best_takes_earliest_minimum() {
        let (ds, split, classifier) = tiny_setup();
        let cfg = BamConfig {
            widths: vec![4, 8, 8],
            epochs: 0,
            seed: 3,
            ..BamConfig::default()
        };
        let state = match train_bam(&classifier, &ds, &split, &cfg) {
            Ok(s) => s,
            Err(BamError::DegenerateClassifier { .. }) => return, // untrained classifier may be one-sided
            Err(e) => panic!("{e}"),
        };
        assert!(state.val_l_minus.is_empty());
        assert!(matches!(select_best(&state), Err(BamError::EmptyHistory)));

        // tie and argmin rules on a synthetic history
        let mut s2 = state;
        s2.val_l_minus = vec![3.0, 1.0, 2.0];
        s2.best = Some(BestSnapshot {
            epoch: 1,
            loss: 1.0,
            state: s2.main.state_tensors(),
        });
        assert_eq!(s2.best_epoch(), Some(1));
    }

    #[test]
    fn short_training_run_is_deterministic_and_freezes_classifier() {
        let (ds, split, mut classifier) = tiny_setup();
        // make the classifier non-degenerate on this data by nudging the FC
        // bias toward a balanced output if needed
        let idx = split.scan_indexes(&ds, SplitPart::Train);
        if partition_by_prediction(&classifier, &ds, &idx, None, "training").is_err() {
            let n = classifier.params().len();
            let mut params = classifier.params_mut();
            params[n - 1].value.data_mut()[0] = 0.0;
            params[n - 1].value.data_mut()[1] = 0.0;
        }
        if partition_by_prediction(&classifier, &ds, &idx, None, "training").is_err() {
            return; // still one-sided on the tiny set; covered end to end elsewhere
        }
        let cfg = BamConfig {
            widths: vec![4, 8, 8],
            epochs: 2,
            seed: 5,
            ..BamConfig::default()
        };
        let digest_before = format!("{:?}", classifier.state_tensors());
        let run = || {
            let state = train_bam(&classifier, &ds, &split, &cfg).unwrap();
            state.main.state_tensors()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(digest_before, format!("{:?}", classifier.state_tensors()));
    }
}
