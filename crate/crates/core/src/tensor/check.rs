//! Central-finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HydraError, Result};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences on up to `samples_per_leaf` coordinates of each leaf.
///
/// Returns max over sampled coordinates of
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(
    f: F,
    leaves: &[(Vec<usize>, Vec<f64>)],
    samples_per_leaf: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let build = |perturb: Option<(usize, usize, f64)>| -> Result<Vec<Tensor>> {
        leaves
            .iter()
            .enumerate()
            .map(|(li, (shape, data))| {
                let mut d = data.clone();
                if let Some((pl, pi, h)) = perturb {
                    if pl == li {
                        d[pi] += h;
                    }
                }
                Tensor::leaf(shape, d)
            })
            .collect()
    };

    let ts = build(None)?;
    let out = f(&ts)?;
    if out.numel() != 1 {
        return Err(HydraError::Usage(format!(
            "grad_check: function output has shape {:?}, expected a scalar",
            out.shape()
        )));
    }
    // A function constant in every leaf yields a grad-free root; analytic
    // gradients are then zero.
    if out.requires_grad() {
        out.backward()?;
    }
    let analytic: Vec<Vec<f64>> = ts
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for (li, (_, data)) in leaves.iter().enumerate() {
        let n = data.len();
        let picks: Vec<usize> = if n <= samples_per_leaf {
            (0..n).collect()
        } else {
            let mut v: Vec<usize> = sample(&mut rng, n, samples_per_leaf).into_vec();
            v.sort_unstable();
            v
        };
        for pi in picks {
            let plus = f(&build(Some((li, pi, FD_STEP)))?)?.item();
            let minus = f(&build(Some((li, pi, -FD_STEP)))?)?.item();
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[li][pi];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
