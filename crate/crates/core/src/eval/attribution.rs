//! Attribution baselines the activation maps are compared against:
//! integrated gradients and gradient-weighted class activation maps.

use super::{EvalError, Result};
use crate::classifier::ClassifierModel;
use crate::diffcore::{Graph, Tensor};
use crate::imgproc::bilinear_upsample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionMethod {
    Bam,
    IntegratedGradients,
    GradCam,
}

impl AttributionMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AttributionMethod::Bam => "bam",
            AttributionMethod::IntegratedGradients => "integrated-gradients",
            AttributionMethod::GradCam => "grad-cam",
        }
    }
}

/// Per-pixel importance map explaining one classifier decision; same shape
/// as the scan it explains.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Tensor<f32>,
    pub method: AttributionMethod,
    pub scan_index: usize,
}

/// Gradient of the target-class logit with respect to the input, evaluated
/// at `point`; `image` only sets the batch shape.
fn input_gradient(
    classifier: &ClassifierModel,
    point: &Tensor<f32>,
    target_class: usize,
) -> Result<Vec<f32>> {
    let s = point.shape().to_vec();
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::from_vec(&[1, s[0], s[1], s[2]], point.data().to_vec())?,
        true,
    );
    let nodes = classifier.forward_eval(&mut g, x)?;
    let mut seed = Tensor::zeros(&[1, 2]);
    seed.data_mut()[target_class] = 1.0;
    g.backward(nodes.logits, Some(seed))?;
    Ok(g
        .grad(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]))
}

/// Target-class logit at a point.
fn logit_at(classifier: &ClassifierModel, point: &Tensor<f32>, target_class: usize) -> Result<f32> {
    let s = point.shape().to_vec();
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::from_vec(&[1, s[0], s[1], s[2]], point.data().to_vec())?,
        false,
    );
    let nodes = classifier.forward_eval(&mut g, x)?;
    Ok(g.value(nodes.logits).data()[target_class])
}

/// Integrated gradients along the straight path from an all-zero baseline:
/// `IG_i = (x_i - b_i) * mean_k dF/dx_i at b + (k/steps)(x - b)`, k = 1..steps.
pub fn integrated_gradients(
    classifier: &ClassifierModel,
    image: &Tensor<f32>,
    target_class: usize,
    steps: usize,
    scan_index: usize,
) -> Result<AttentionMap> {
    if steps < 1 {
        return Err(EvalError::BadSteps(steps));
    }
    let mut avg = vec![0.0f64; image.numel()];
    for k in 1..=steps {
        let alpha = k as f32 / steps as f32;
        let point = image.map(|v| v * alpha);
        let grad = input_gradient(classifier, &point, target_class)?;
        for (a, g) in avg.iter_mut().zip(&grad) {
            *a += *g as f64;
        }
    }
    let inv = 1.0 / steps as f64;
    let values: Vec<f32> = image
        .data()
        .iter()
        .zip(&avg)
        .map(|(&x, &g)| (x as f64 * g * inv) as f32)
        .collect();
    Ok(AttentionMap {
        values: Tensor::from_vec(image.shape(), values)?,
        method: AttributionMethod::IntegratedGradients,
        scan_index,
    })
}

/// Completeness residual: `|sum(IG) - (F_t(x) - F_t(0))| / max(|gap|, 1e-6)`.
pub fn ig_completeness_gap(
    classifier: &ClassifierModel,
    image: &Tensor<f32>,
    map: &AttentionMap,
    target_class: usize,
) -> Result<f64> {
    let fx = logit_at(classifier, image, target_class)? as f64;
    let baseline = image.map(|_| 0.0);
    let f0 = logit_at(classifier, &baseline, target_class)? as f64;
    let total: f64 = map.values.data().iter().map(|&v| v as f64).sum();
    let gap = fx - f0;
    Ok((total - gap).abs() / gap.abs().max(1e-6))
}

/// Grad-CAM at the last conv stage: channel weights are the spatial means of
/// the target-logit gradient, the weighted activation sum is rectified and
/// bilinearly upsampled, and the single map is copied to every input channel
/// (the method blends modalities by construction).
pub fn grad_cam(
    classifier: &ClassifierModel,
    image: &Tensor<f32>,
    target_class: usize,
    scan_index: usize,
) -> Result<AttentionMap> {
    let s = image.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(&[1, c, h, w], image.data().to_vec())?, true);
    let nodes = classifier.forward_eval(&mut g, x)?;
    let mut seed = Tensor::zeros(&[1, 2]);
    seed.data_mut()[target_class] = 1.0;
    g.backward(nodes.logits, Some(seed))?;

    let act = g.value(nodes.last_stage_act).clone();
    let grad = g
        .grad(nodes.last_stage_act)
        .expect("activation on the gradient path")
        .clone();
    let asp = act.shape();
    let (ac, ah, aw) = (asp[1], asp[2], asp[3]);
    let plane = ah * aw;
    let mut cam = vec![0.0f32; plane];
    for ch in 0..ac {
        let gplane = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight: f32 = gplane.iter().sum::<f32>() / plane as f32;
        let aplane = &act.data()[ch * plane..(ch + 1) * plane];
        for (o, &a) in cam.iter_mut().zip(aplane) {
            *o += weight * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let up = bilinear_upsample(&cam, ah, aw, h, w);
    let mut values = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        values.extend_from_slice(&up);
    }
    Ok(AttentionMap {
        values: Tensor::from_vec(&s, values)?,
        method: AttributionMethod::GradCam,
        scan_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_image(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|i| ((i * 29 % 83) as f32) / 83.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gets_zero_attribution() {
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 3).unwrap();
        let x = Tensor::zeros(&[2, 32, 32]);
        let ig = integrated_gradients(&model, &x, 1, 8, 0).unwrap();
        assert!(ig.values.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            integrated_gradients(&model, &x, 1, 0, 0),
            Err(EvalError::BadSteps(0))
        ));
    }

    #[test]
    fn linear_scorer_gives_closed_form_attribution() {
        // For F(x) = <w, x> from a zero baseline, IG = w ⊙ x exactly at any
        // step count. Drive the graph directly with a weighted sum.
        let x = demo_image(1, 4, 4);
        let wvec: Vec<f32> = (0..16).map(|i| ((i as f32) - 8.0) / 9.0).collect();
        let steps = 16;
        let mut avg = vec![0.0f64; 16];
        for k_i in 1..=steps {
            let alpha = k_i as f32 / steps as f32;
            let mut g = Graph::new();
            let p = g.leaf(x.map(|v| v * alpha), true);
            let s = g.weighted_sum(p, wvec.clone()).unwrap();
            g.backward(s, None).unwrap();
            for (a, &gv) in avg.iter_mut().zip(g.grad(p).unwrap().data()) {
                *a += gv as f64;
            }
        }
        for i in 0..16 {
            let ig = x.data()[i] as f64 * avg[i] / steps as f64;
            let want = (wvec[i] * x.data()[i]) as f64;
            assert!((ig - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ig_completeness_on_a_small_classifier() {
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 5).unwrap();
        let x = demo_image(2, 32, 32);
        let ig = integrated_gradients(&model, &x, 1, 64, 0).unwrap();
        let gap = ig_completeness_gap(&model, &x, &ig, 1).unwrap();
        assert!(gap < 0.01, "completeness residual {gap}");
    }

    #[test]
    fn grad_cam_is_non_negative_full_size_and_matches_naive_recompute() {
        let model = ClassifierModel::build(2, &[4, 4, 8, 8, 8], 6).unwrap();
        let x = demo_image(2, 32, 32);
        let cam = grad_cam(&model, &x, 1, 0).unwrap();
        assert_eq!(cam.values.shape(), &[2, 32, 32]);
        assert!(cam.values.data().iter().all(|&v| v >= 0.0));
        // both channels carry the same blended map
        assert_eq!(
            cam.values.data()[..32 * 32],
            cam.values.data()[32 * 32..]
        );

        // naive recomputation with explicit loops
        let mut g = Graph::new();
        let xin = g
            .leaf(
                Tensor::from_vec(&[1, 2, 32, 32], x.data().to_vec()).unwrap(),
                true,
            );
        let nodes = model.forward_eval(&mut g, xin).unwrap();
        let mut seed = Tensor::zeros(&[1, 2]);
        seed.data_mut()[1] = 1.0;
        g.backward(nodes.logits, Some(seed)).unwrap();
        let act = g.value(nodes.last_stage_act).clone();
        let grad = g.grad(nodes.last_stage_act).unwrap().clone();
        let (ac, ah, aw) = (act.shape()[1], act.shape()[2], act.shape()[3]);
        let mut naive = vec![0.0f32; ah * aw];
        for ch in 0..ac {
            let mut wsum = 0.0f32;
            for y in 0..ah {
                for xx in 0..aw {
                    wsum += grad.data()[(ch * ah + y) * aw + xx];
                }
            }
            let weight = wsum / (ah * aw) as f32;
            for y in 0..ah {
                for xx in 0..aw {
                    naive[y * aw + xx] += weight * act.data()[(ch * ah + y) * aw + xx];
                }
            }
        }
        for v in naive.iter_mut() {
            *v = v.max(0.0);
        }
        let naive_up = crate::imgproc::bilinear_upsample(&naive, ah, aw, 32, 32);
        for (a, b) in cam.values.data()[..32 * 32].iter().zip(&naive_up) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
