//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker re-evaluates a user-supplied loss closure with single
//! parameter entries nudged by ±h and compares the central difference
//! against the gradient produced by [`Tensor::backward`]. The closure must
//! be deterministic: any stochastic choices (masking, negative sampling)
//! have to be frozen by the caller before checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked entries.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: (String, usize),
    /// Analytic / numeric gradient at the worst entry.
    pub worst_pair: (f64, f64),
    /// Total number of entries checked.
    pub checked: usize,
}

/// Relative error with an absolute floor, so near-zero gradients compare
/// on an absolute scale instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check `loss_fn` gradients for every named parameter.
///
/// Up to `max_per_param` entries of each parameter are probed (all of them
/// when the parameter is at most that large); larger tensors are sampled
/// with `rng` so the sweep stays fast while still touching every tensor.
pub fn check<F>(
    params: &[(String, Tensor)],
    mut loss_fn: F,
    h: f64,
    max_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut() -> Result<Tensor, TensorError>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad_vec().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for ((name, p), g) in params.iter().zip(grads.iter()) {
        let n = p.len();
        let indices: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in indices {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = loss_fn()?.item();
            p.data_mut()[i] = orig - h;
            let down = loss_fn()?.item();
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(g[i], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (name.clone(), i);
                report.worst_pair = (g[i], fd);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn quadratic_gradient_checks_cleanly() {
        let x = Tensor::param(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = Tensor::param(&[3, 1], vec![1.5, 0.25, -0.75]).unwrap();
        let params = vec![("x".to_string(), x.clone()), ("w".to_string(), w.clone())];
        let mut rng = stream(0, "gradcheck-test", 0);
        let report = check(
            &params,
            || {
                let y = x.matmul(&w)?;
                y.mul(&y)?.mean_all()
            },
            1e-5,
            16,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_nonlinear_graph_checks_cleanly() {
        let mut init = stream(3, "gradcheck-init", 0);
        let x = Tensor::param_randn(&[2, 4], 0.5, &mut init);
        let w = Tensor::param_randn(&[4, 3], 0.5, &mut init);
        let b = Tensor::param_zeros(&[1, 3]);
        let gamma = Tensor::param(&[1, 4], vec![1.0; 4]).unwrap();
        let beta = Tensor::param_zeros(&[1, 4]);
        let params = vec![
            ("x".to_string(), x.clone()),
            ("w".to_string(), w.clone()),
            ("b".to_string(), b.clone()),
            ("gamma".to_string(), gamma.clone()),
            ("beta".to_string(), beta.clone()),
        ];
        let mut rng = stream(4, "gradcheck-test", 1);
        let report = check(
            &params,
            || {
                let h = x.layer_norm(&gamma, &beta, 1e-5)?;
                let z = h.linear(&w, &b)?.gelu()?;
                let s = z.softmax_rows()?;
                s.cross_entropy(&[0, 2])
            },
            1e-5,
            32,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {:?}", report);
    }
}
