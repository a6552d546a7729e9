#![allow(dead_code)]

use scalesiam_core::tape::{Tape, Var};
use scalesiam_core::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Largest relative gap between two gradients, entry by entry. Entries far
/// below the gradient's own scale are compared against that scale instead.
pub fn grad_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Checks every input of a tape-built scalar function against central
/// differences; returns the worst relative error.
pub fn check_tape(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vs);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = build(&mut t, &vs);
    let grads = t.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_grad(x, |p| {
            let mut xs = inputs.to_vec();
            xs[i] = p.clone();
            eval(&xs)
        });
        worst = worst.max(grad_rel_err(&analytic, &numeric));
    }
    worst
}

/// Values bounded away from zero, so ReLU kinks are out of finite-difference reach.
pub fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}
