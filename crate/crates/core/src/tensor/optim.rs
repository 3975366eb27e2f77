use super::Tensor;
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v ← m·v + g`, `w ← w − lr·v`.
pub fn sgd_momentum_step(
    weights: &mut Tensor,
    velocity: &mut Tensor,
    grad: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if weights.shape() != velocity.shape() || weights.len() != grad.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "weights {:?}, velocity {:?}, grad len {}",
                weights.shape(),
                velocity.shape(),
                grad.len()
            ),
        ));
    }
    for ((w, v), g) in weights.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    if !weights.is_finite() {
        return Err(Error::NonFinite {
            op: "sgd_momentum_step",
        });
    }
    Ok(())
}
