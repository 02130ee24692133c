//! Central finite-difference gradient checking, run at 64-bit precision on
//! micro-sized inputs.

use ndarray::ArrayD;

use super::tape::{Tape, Var};

pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input index and flat element index of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compares analytic gradients of `f` (a scalar-valued graph builder) with
/// central differences for every element of every input. Inputs become
/// gradient-carrying leaves.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
) -> GradCheckReport {
    let eval = |points: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &vars).scalar_value()
    };

    let analytic: Vec<ArrayD<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&tape, &vars);
        let mut grads = tape.backward(root);
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| grads.take(*v).unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
            .collect()
    };

    const H: f64 = 1e-5;
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0) };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        for j in 0..n {
            let orig = work[i].as_slice().unwrap()[j];
            work[i].as_slice_mut().unwrap()[j] = orig + H;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - H;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;

            let fd = (fp - fm) / (2.0 * H);
            let an = analytic[i].as_slice().unwrap()[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    report
}
