//! Central finite-difference oracle for the reverse-mode engine.
//!
//! The function under test is re-run from scratch for every perturbation and
//! only its forward values are read, so the reference never touches the
//! backward closures it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst mismatch found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over all checked coordinates.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares AD gradients of `Σ w ⊙ f(inputs)` (random fixed `w`) with central
/// differences of step `h`. At most `max_per_input` coordinates of each input
/// are probed (all of them when the input is smaller).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let n_out: usize = out_shape.iter().product();
    let proj = Tensor::new(out_shape, (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let loss = g.dot_const(out, &proj)?;
    let grads = g.backward(loss)?;

    let objective = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let ad = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = objective(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = objective(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (ad[j] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape and data agree")
}
