use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Target values above this count as positive support.
pub const POSITIVE_SUPPORT: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain mean squared error.
    Uniform,
    /// Positive-support cells share the same total weight as the rest.
    #[default]
    Balanced,
}

fn cell_weights<E: Elem>(target: &[E], rule: LossWeighting) -> Vec<E> {
    let thr = E::cst(POSITIVE_SUPPORT);
    let n = target.len();
    let n_pos = target.iter().filter(|t| **t > thr).count();
    match rule {
        LossWeighting::Balanced if n_pos > 0 && n_pos < n => {
            let w_pos = E::cst((n - n_pos) as f64 / n_pos as f64);
            target
                .iter()
                .map(|t| if *t > thr { w_pos } else { E::one() })
                .collect()
        }
        _ => vec![E::one(); n],
    }
}

/// Per-sample `Σ w·(p − t)² / Σ w`, averaged over the batch, with its gradient.
pub fn weighted_mse_loss<E: Elem>(pred: &Tensor<E>, target: &Tensor<E>, rule: LossWeighting) -> Result<(E, Tensor<E>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.n();
    let nf = E::from_usize(n).unwrap();
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = E::zero();
    for b in 0..n {
        let p = pred.item(b);
        let t = target.item(b);
        let w = cell_weights(t, rule);
        let wsum: E = w.iter().copied().sum();
        let mut loss = E::zero();
        let g = grad.item_mut(b);
        for i in 0..p.len() {
            let r = p[i] - t[i];
            loss += w[i] * r * r;
            g[i] = E::cst(2.0) * w[i] * r / (wsum * nf);
        }
        total += loss / wsum;
    }
    Ok((total / nf, grad))
}
