use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Symmetric normalized-MSE between predictions and target projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalLoss<T: Scalar> {
    pub value: T,
    pub grad_pred1: Vec<T>,
    pub grad_pred2: Vec<T>,
}

/// `‖q/‖q‖ − z/‖z‖‖²` and its gradient with respect to `q`. `z` is constant.
pub fn normalized_mse<T: Scalar>(q: &[T], z: &[T]) -> Result<(T, Vec<T>)> {
    if q.len() != z.len() {
        return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", q.len(), z.len())));
    }
    let nq = norm(q);
    let nz = norm(z);
    if nq == T::zero() || nz == T::zero() {
        return Err(Error::DegenerateEmbedding("zero-norm embedding in global loss".into()));
    }
    let u: Vec<T> = q.iter().map(|&v| v / nq).collect();
    let d: Vec<T> = u.iter().zip(z).map(|(&a, &b)| a - b / nz).collect();
    let value = d.iter().map(|&v| v * v).sum();
    let two = T::lit(2.0);
    let ud: T = u.iter().zip(&d).map(|(&a, &b)| a * b).sum();
    let grad = u.iter().zip(&d).map(|(&a, &b)| two * (b - a * ud) / nq).collect();
    Ok((value, grad))
}

pub(crate) fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `‖q̄₁ − z̄₂‖² + ‖q̄₂ − z̄₁‖²` for one sample. Gradients flow only into the
/// predictions.
pub fn global_loss<T: Scalar>(pred1: &[T], tgt_proj2: &[T], pred2: &[T], tgt_proj1: &[T]) -> Result<GlobalLoss<T>> {
    let (a, grad_pred1) = normalized_mse(pred1, tgt_proj2)?;
    let (b, grad_pred2) = normalized_mse(pred2, tgt_proj1)?;
    Ok(GlobalLoss {
        value: a + b,
        grad_pred1,
        grad_pred2,
    })
}
