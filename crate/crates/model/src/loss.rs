//! Mean squared error against one-hot targets.

use crate::element::Element;
use crate::error::{ModelError, Result};
use crate::tensor::Tensor;

/// Mean over pixels and classes of `(p - onehot(label))²`, and its gradient
/// with respect to `probs`. `labels` holds one class index per pixel in
/// `[n, h, w]` order.
pub fn mse_loss<S: Element>(probs: &Tensor<S>, labels: &[u8]) -> Result<(f64, Tensor<S>)> {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(ModelError::Shape(format!(
            "{} labels for probabilities of shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(ModelError::Shape(format!("label {bad} outside {c} classes")));
    }
    let count = (n * c * hw) as f64;
    let scale = S::lit(2.0 / count);
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = 0.0f64;
    for s in 0..n {
        let p = probs.sample(s);
        let lab = &labels[s * hw..(s + 1) * hw];
        let g = grad.sample_mut(s);
        for ch in 0..c {
            for i in 0..hw {
                let target = if lab[i] as usize == ch { S::one() } else { S::zero() };
                let d = p[ch * hw + i] - target;
                total += d.to_f64_lossy().powi(2);
                g[ch * hw + i] = scale * d;
            }
        }
    }
    Ok((total / count, grad))
}
