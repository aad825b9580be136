//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Outcome of a gradient check: one relative error per checked input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Norm-wise relative error `‖a−b‖ / max(‖a‖+‖b‖, 1e-6)`.
///
/// The floor keeps identically-zero gradients from dividing roundoff by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-6)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares tape gradients of `f` against central differences for every
/// input tensor. `f` must build a scalar root from the given leaves.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;

    let evaluate = |which: usize, data: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    tape.constant(Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same shape"))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let root = f(&mut tape, &vars).expect("forward succeeded once already");
        tape.value(root)[0]
    };

    let per_input = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let zeros = vec![0.0; t.len()];
            let analytic = tape.grad(vars[i]).unwrap_or(&zeros);
            let numeric = central_difference(|x| evaluate(i, x), t.data(), step);
            relative_error(analytic, &numeric)
        })
        .collect();
    Ok(GradCheck { per_input })
}
