//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The numeric side only uses forward evaluations, so it stays independent
//! of the reverse pass it validates.

use crate::tensor::{Matrix, Tape, Var};

/// Largest relative error between tape gradients and central differences
/// over every entry of every input, with an absolute floor of 1 in the
/// denominator: `|a - n| / max(1, |a|, |n|)`.
///
/// `build` must construct the same scalar loss from fresh leaves each
/// call (no hidden randomness).
pub fn finite_diff_max_rel_err<F>(build: F, inputs: &[Matrix], h: f64) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |points: &[Matrix]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|m| tape.leaf(m.clone(), false)).collect();
        let loss = build(&tape, &vars);
        tape.value(loss).scalar()
    };

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let loss = build(&tape, &vars);
    assert_eq!(tape.shape(loss), (1, 1), "gradient check needs a scalar loss");
    let grads = tape.backward(loss);
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
