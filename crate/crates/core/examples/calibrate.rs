// temporary step profile
use bam_core::classifier::*;
use bam_core::diffcore::*;
use bam_core::generator::*;
use std::time::Instant;

fn main() {
    let classifier = ClassifierModel::build(2, &[16, 32, 64, 64, 64], 1).unwrap();
    let mut gm = GeneratorModel::build(2, &[16, 32, 64], 2).unwrap();
    let mut ga = GeneratorModel::build(2, &[16, 32, 64], 3).unwrap();
    let x = Tensor::from_vec(&[3, 2, 32, 32], (0..3*2*32*32).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();

    for _ in 0..4 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let xp = g.leaf(x.clone(), false);
        let xm = g.leaf(x.clone(), false);
        let fm = gm.forward_train(&mut g, xp).unwrap();
        let f1 = classifier.forward_eval(&mut g, fm.output).unwrap();
        let h_minus = g.softmax_cross_entropy(f1.logits, &[0,0,0]).unwrap();
        let pm = gm.forward_train(&mut g, xm).unwrap();
        let m_minus = g.mean_abs_error(pm.output, xm).unwrap();
        let fp = ga.forward_train(&mut g, xm).unwrap();
        let f2 = classifier.forward_eval(&mut g, fp.output).unwrap();
        let h_plus = g.softmax_cross_entropy(f2.logits, &[1,1,1]).unwrap();
        let pp = ga.forward_train(&mut g, xp).unwrap();
        let m_plus = g.mean_abs_error(pp.output, xp).unwrap();
        let cm = gm.forward_train(&mut g, fp.output).unwrap();
        let cmm = g.mean_abs_error(cm.output, xm).unwrap();
        let cp = ga.forward_train(&mut g, fm.output).unwrap();
        let cpp = g.mean_abs_error(cp.output, xp).unwrap();
        let cyc = g.sum_scalars(&[cmm, cpp]).unwrap();
        let lm = g.sum_scalars(&[h_minus, m_minus, cyc]).unwrap();
        let lp = g.sum_scalars(&[h_plus, m_plus, cyc]).unwrap();
        let t_fwd = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        for pass in [&fp, &pp, &cp] { for &(_, n) in &pass.bindings { g.set_needs_grad(n, false); } }
        g.backward(lm, None).unwrap();
        for pass in [&fm, &pm, &cm] { gm.accumulate_grads(&g, &pass.bindings); }
        let t_b1 = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        g.zero_grads();
        for pass in [&fp, &pp, &cp] { for &(_, n) in &pass.bindings { g.set_needs_grad(n, true); } }
        for pass in [&fm, &pm, &cm] { for &(_, n) in &pass.bindings { g.set_needs_grad(n, false); } }
        g.backward(lp, None).unwrap();
        for pass in [&fp, &pp, &cp] { ga.accumulate_grads(&g, &pass.bindings); }
        let t_b2 = t2.elapsed().as_secs_f64();
        sgd_nesterov_step(&mut gm.params_mut(), 5e-4, 0.9).unwrap();
        sgd_nesterov_step(&mut ga.params_mut(), 5e-4, 0.9).unwrap();
        println!("fwd {:.0} ms, bwd- {:.0} ms, bwd+ {:.0} ms, total {:.0} ms",
            t_fwd*1e3, t_b1*1e3, t_b2*1e3, (t_fwd+t_b1+t_b2)*1e3);
    }
}
