//! Edge-enhancement loss: pixel-weighted binary cross-entropy computed in
//! logit space, with weight 4 on mask-boundary pixels and 1 elsewhere.

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Weight given to boundary pixels; interior and background pixels get 1.
pub const EDGE_WEIGHT: f64 = 4.0;

fn check_binary<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    if !mask.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        return Err(Error::Data("mask must be strictly binary (0/1)".into()));
    }
    Ok(())
}

/// Per-pixel loss weights for a binary mask: 4 where the pixel's value
/// differs from at least one 4-neighbor (so both the innermost foreground
/// ring and the outermost background ring count as boundary), 1 elsewhere.
/// Out-of-bounds neighbors are treated as equal to the center — the image
/// border is not an object edge.
pub fn edge_weight_map<T: Scalar>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    check_binary(mask)?;
    let [n, c, h, w] = mask.shape();
    let edge = lit::<T>(EDGE_WEIGHT);
    let mut out = Tensor::filled(mask.shape(), T::one());
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let center = mask.at(ni, ci, hi, wi);
                    let differs = (hi > 0 && mask.at(ni, ci, hi - 1, wi) != center)
                        || (hi + 1 < h && mask.at(ni, ci, hi + 1, wi) != center)
                        || (wi > 0 && mask.at(ni, ci, hi, wi - 1) != center)
                        || (wi + 1 < w && mask.at(ni, ci, hi, wi + 1) != center);
                    if differs {
                        out.set(ni, ci, hi, wi, edge);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_loss_inputs<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<()> {
    if logits.shape() != target.shape() || logits.shape() != weights.shape() {
        return Err(Error::Data(format!(
            "loss inputs must share one shape, got logits {:?}, target {:?}, weights {:?}",
            logits.shape(),
            target.shape(),
            weights.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("loss received non-finite logits".into()));
    }
    check_binary(target)
}

/// Mean weighted binary cross-entropy over all elements, evaluated in the
/// numerically stable logit form
/// `l(p, t) = max(p, 0) - p*t + ln(1 + exp(-|p|))`,
/// together with its gradient `dL/dp = w * (sigmoid(p) - t) / N`.
pub fn ee_loss_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    check_loss_inputs(logits, target, weights)?;
    let inv_n = lit::<T>(1.0 / logits.len() as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for ((g, &p), (&t, &w)) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(target.data().iter().zip(weights.data()))
    {
        let per_pixel = p.max(T::zero()) - p * t + (-p.abs()).exp().ln_1p();
        total = w.mul_add(per_pixel, total);
        let sig = T::one() / (T::one() + (-p).exp());
        *g = w * (sig - t) * inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Loss value alone; see [`ee_loss_with_grad`].
pub fn ee_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<T> {
    ee_loss_with_grad(logits, target, weights).map(|(v, _)| v)
}
