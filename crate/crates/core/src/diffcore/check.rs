//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64. The op under test is provided as a closure that builds a
//! scalar-valued graph from leaf nodes; the harness compares the analytic
//! gradients against central differences with step `1e-5 * max(1, |x|)`.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `d loss / d inputs` for a scalar-valued function of the given leaf
/// tensors. Relative error uses `max(|analytic|, |numeric|, 1e-3)` as the
/// denominator so near-zero gradients are judged on absolute error.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], tolerance: f64) -> FiniteDiffReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |points: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let root = build(&mut g, &ids);
        let loss = g.value(root).item();
        g.backward(root, None).expect("backward in gradient check");
        let grads = ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
            })
            .collect();
        (loss, grads)
    };

    let (_, analytic) = eval(inputs);

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let x = t.data()[ei];
            let h = 1e-5 * x.abs().max(1.0);
            work[ti].data_mut()[ei] = x + h;
            let (fp, _) = {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = work.iter().map(|t| g.leaf(t.clone(), false)).collect();
                let root = build(&mut g, &ids);
                (g.value(root).item(), ())
            };
            work[ti].data_mut()[ei] = x - h;
            let fm = {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = work.iter().map(|t| g.leaf(t.clone(), false)).collect();
                let root = build(&mut g, &ids);
                g.value(root).item()
            };
            work[ti].data_mut()[ei] = x;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-3);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    FiniteDiffReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        tolerance,
        pass: max_rel < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::BnMode;

    #[test]
    fn quadratic_gradient_is_analytic() {
        // f(x) = sum x^2 at x = [1, 2] -> grad [2, 4]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let id = g.leaf(x.clone(), true);
        let sq = g.mul(id, id).unwrap();
        let root = g.weighted_sum(sq, vec![1.0, 1.0]).unwrap();
        g.backward(root, None).unwrap();
        assert_eq!(g.grad(id).unwrap().data(), &[2.0, 4.0]);

        let report = finite_diff_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0]).unwrap();
                g.weighted_sum(sq, vec![1.0, 1.0]).unwrap()
            },
            &[x],
            1e-8,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_chain_matches_finite_differences() {
        let x = Tensor::from_vec(
            &[1, 2, 5, 5],
            (0..50).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[3, 2, 3, 3],
            (0..54).map(|i| ((i * 13 % 11) as f64 - 5.0) / 9.0).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap();
        let coeffs: Vec<f64> = (0..3 * 25).map(|i| ((i % 7) as f64 - 3.0) / 5.0).collect();
        let report = finite_diff_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
                g.weighted_sum(y, coeffs.clone()).unwrap()
            },
            &[x, w, b],
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn batch_norm_train_matches_finite_differences() {
        let x = Tensor::from_vec(
            &[2, 2, 3, 3],
            (0..36).map(|i| ((i * 29 % 23) as f64 - 11.0) / 6.0).collect(),
        )
        .unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.2, -0.4]).unwrap();
        let coeffs: Vec<f64> = (0..36).map(|i| ((i % 5) as f64 - 2.0) / 3.0).collect();
        let report = finite_diff_check(
            |g, ids| {
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y = g
                    .batch_norm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, BnMode::Train, 1e-5, 0.1)
                    .unwrap();
                g.weighted_sum(y, coeffs.clone()).unwrap()
            },
            &[x, gamma, beta],
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
